"""Small dense-network engine: forward, reverse-mode gradients, Adam, soft
target updates and a versioned binary checkpoint format.

Weights are stored ``(fan_in, fan_out)`` so a batch ``X`` of shape
``(n, fan_in)`` maps to ``X @ W + b``.
"""
from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from numba import njit

ACTIVATIONS = ("identity", "relu", "sigmoid")


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _sigmoid(z):
    # split form avoids overflow warnings for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"bias {self.b.shape} does not match weights {self.W.shape}")


def _param_views(flat: np.ndarray, shapes) -> List[np.ndarray]:
    views, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        views.append(flat[pos:pos + n].reshape(shape))
        pos += n
    return views


class DenseNet:
    """Stack of dense layers whose parameters live in one flat vector.

    ``layer.W`` / ``layer.b`` are views into ``self.flat``, so optimizers and
    target updates can work on the flat vector directly.
    """

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.W.shape[1] != nxt.W.shape[0]:
                raise ShapeError(f"layer dims do not chain: {prev.W.shape} -> {nxt.W.shape}")
        self.shapes = []
        for l in layers:
            self.shapes += [l.W.shape, l.b.shape]
        self.flat = np.concatenate([a.ravel() for l in layers for a in (l.W, l.b)])
        views = _param_views(self.flat, self.shapes)
        self.layers: List[Layer] = []
        for i, l in enumerate(layers):
            nl = Layer.__new__(Layer)
            nl.W, nl.b, nl.activation = views[2 * i], views[2 * i + 1], l.activation
            self.layers.append(nl)

    @classmethod
    def build(cls, sizes: Sequence[int], hidden="relu", output="identity",
              rng: Optional[np.random.Generator] = None, final_scale: float = 3e-3) -> "DenseNet":
        """Fan-in uniform init for hidden layers, small uniform init for the head."""
        rng = rng if rng is not None else np.random.default_rng()
        layers = []
        n = len(sizes) - 1
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == n - 1
            lim = final_scale if last else 1.0 / math.sqrt(fi)
            W = rng.uniform(-lim, lim, size=(fi, fo))
            b = rng.uniform(-lim, lim, size=fo)
            layers.append(Layer(W, b, output if last else hidden))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    @property
    def sizes(self) -> List[int]:
        return [self.input_dim] + [l.W.shape[1] for l in self.layers]

    @property
    def n_params(self) -> int:
        return self.flat.size

    def params(self) -> List[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.W, l.b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def same_shape(self, other: "DenseNet") -> bool:
        return ([(l.W.shape, l.activation) for l in self.layers]
                == [(l.W.shape, l.activation) for l in other.layers])

    def forward(self, x, cache: Optional[list] = None) -> np.ndarray:
        """Evaluate on one input vector or a batch of row vectors.

        When ``cache`` is a list it is filled with each layer's input and
        output, which :meth:`backward` consumes.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.input_dim:
            raise ShapeError(f"expected input dim {self.input_dim}, got {h.shape[1]}")
        for l in self.layers:
            inp = h
            z = h @ l.W
            z += l.b
            if l.activation == "relu":
                h = np.maximum(z, 0.0)
            elif l.activation == "sigmoid":
                h = _sigmoid(z)
            else:
                h = z
            if cache is not None:
                cache.append((inp, h))
        return h[0] if single else h

    __call__ = forward


class GradientTape:
    """Per-parameter gradients (same order as :meth:`DenseNet.params`) plus
    the gradient with respect to the network input.

    ``grads`` are views into the flat vector ``flat``.
    """

    def __init__(self, flat: np.ndarray, shapes, input_grad: np.ndarray):
        self.flat = flat
        self.grads = _param_views(flat, shapes)
        self.input_grad = input_grad

    @classmethod
    def zeros_like(cls, net: "DenseNet") -> "GradientTape":
        return cls(np.zeros(net.n_params), net.shapes, np.zeros(net.input_dim))

    def global_norm(self) -> float:
        return math.sqrt(float(np.dot(self.flat, self.flat)))

    def clip_global_norm(self, max_norm: float) -> float:
        """Rescale in place so the global norm is at most ``max_norm``."""
        norm = self.global_norm()
        if norm > max_norm:
            self.flat *= max_norm / norm
        return norm


def backward(net: DenseNet, x, upstream, cache: Optional[list] = None,
             params: bool = True) -> GradientTape:
    """Gradient of ``sum(net(x) * upstream)`` w.r.t. every parameter and ``x``.

    Batched inputs have their parameter gradients summed over the batch.
    A ``cache`` from a matching forward pass skips the recomputation;
    ``params=False`` computes only the input gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        g = g[None, :] if g.ndim == 1 else g
    if cache is None:
        cache = []
        net.forward(x, cache=cache)
    if len(cache) != len(net.layers):
        raise ShapeError("cache does not match network depth")
    if g.shape != cache[-1][1].shape:
        raise ShapeError(f"upstream shape {g.shape} != output shape {cache[-1][1].shape}")
    tape = GradientTape(np.zeros(net.n_params if params else 0), net.shapes if params else [], None)
    for i in range(len(net.layers) - 1, -1, -1):
        l = net.layers[i]
        inp, out = cache[i]
        if l.activation == "relu":
            g = g * (out > 0.0)
        elif l.activation == "sigmoid":
            g = g * out * (1.0 - out)
        if params:
            np.matmul(inp.T, g, out=tape.grads[2 * i])
            np.sum(g, axis=0, out=tape.grads[2 * i + 1])
        g = g @ l.W.T
    tape.input_grad = g[0] if single else g
    return tape


class Adam:
    """Bias-corrected Adam; updates the network parameters in place."""

    def __init__(self, net: DenseNet, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(net.n_params)
        self.v = np.zeros(net.n_params)
        self.t = 0

    def step(self, tape: GradientTape) -> None:
        self.t += 1
        adam_update(self.net, tape, self.t, self.lr, self.beta1, self.beta2, self.eps,
                    moments=(self.m, self.v))


def adam_update(net: DenseNet, tape: GradientTape, step_count: int, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                moments=None) -> DenseNet:
    """One Adam step on ``net`` in place; ``moments=(m, v)`` persists state
    between calls (fresh zero moments otherwise)."""
    g = tape.flat
    if g.shape != net.flat.shape:
        raise ShapeError("gradient tape does not match network")
    if not math.isfinite(float(np.dot(g, g))):
        bad = [i for i, b in enumerate(tape.grads) if not np.all(np.isfinite(b))]
        raise FloatingPointError(f"non-finite gradient in parameter blocks {bad}")
    if moments is None:
        moments = (np.zeros_like(g), np.zeros_like(g))
    m, v = moments
    c1 = 1.0 - beta1 ** step_count
    c2 = 1.0 - beta2 ** step_count
    _adam_kernel(net.flat, g, m, v, beta1, beta2, lr * math.sqrt(c2) / c1, eps * math.sqrt(c2))
    return net


@njit(cache=True)
def _adam_kernel(p, g, m, v, beta1, beta2, step, eps_hat):
    # eps_hat folds the second-moment bias correction into eps
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= step * m[i] / (math.sqrt(v[i]) + eps_hat)


@njit(cache=True)
def _polyak(target, online, tau):
    keep = 1.0 - tau
    for i in range(target.size):
        target[i] = keep * target[i] + tau * online[i]


def soft_update(target: DenseNet, online: DenseNet, tau: float) -> DenseNet:
    """Polyak averaging ``target <- tau * online + (1 - tau) * target`` in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if not target.same_shape(online):
        raise ShapeError("target and online networks differ in shape")
    if tau == 1.0:
        target.flat[...] = online.flat
    elif tau > 0.0:
        _polyak(target.flat, online.flat, float(tau))
    return target


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FESPOL\x00\x01"
FORMAT_VERSION = 1
MODES = {"starter": 0, "tracker": 1, "generic": 2}
_MODE_NAMES = {v: k for k, v in MODES.items()}
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


@dataclass
class PolicyCheckpoint:
    mode: str
    actor: DenseNet
    critic: Optional[DenseNet] = None
    obs_scale: np.ndarray = field(default_factory=lambda: np.zeros(0))
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.obs_scale = np.asarray(self.obs_scale, dtype=np.float64)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        nets = [self.actor] + ([self.critic] if self.critic is not None else [])
        buf.write(struct.pack("<IBB", FORMAT_VERSION, MODES[self.mode], len(nets)))
        for net in nets:
            buf.write(struct.pack("<I", len(net.layers)))
            for l in net.layers:
                fi, fo = l.W.shape
                buf.write(struct.pack("<IIB", fi, fo, _ACT_CODES[l.activation]))
                buf.write(l.W.astype("<f8").tobytes(order="C"))
                buf.write(l.b.astype("<f8").tobytes(order="C"))
        buf.write(struct.pack("<I", self.obs_scale.size))
        buf.write(self.obs_scale.astype("<f8").tobytes())
        meta = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        body = buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes, expect_mode: Optional[str] = None) -> "PolicyCheckpoint":
        if len(data) < len(MAGIC) + 10 or data[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a policy checkpoint (bad magic)")
        body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
        r = _Reader(body, len(MAGIC))
        version, mode_code, n_nets = r.unpack("<IBB")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if mode_code not in _MODE_NAMES:
            raise CheckpointError(f"unknown mode tag {mode_code}")
        nets = []
        for _ in range(n_nets):
            (n_layers,) = r.unpack("<I")
            layers = []
            for _ in range(n_layers):
                fi, fo, act = r.unpack("<IIB")
                W = r.array(fi * fo).reshape(fi, fo)
                b = r.array(fo)
                layers.append(Layer(W, b, ACTIVATIONS[act]))
            nets.append(DenseNet(layers))
        (n_scale,) = r.unpack("<I")
        scale = r.array(n_scale)
        (n_meta,) = r.unpack("<I")
        meta = json.loads(r.take(n_meta).decode("utf-8"))
        ckpt = cls(_MODE_NAMES[mode_code], nets[0], nets[1] if len(nets) > 1 else None, scale, meta)
        if expect_mode is not None:
            ckpt.require_mode(expect_mode)
        return ckpt

    def require_mode(self, mode: str) -> None:
        from .env import obs_dim
        want = obs_dim(mode)
        if self.actor.input_dim != want or self.mode != mode:
            raise CheckpointError(
                f"checkpoint is a {self.mode} policy with input dim {self.actor.input_dim}; "
                f"a {mode} policy needs input dim {want}")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, expect_mode: Optional[str] = None) -> "PolicyCheckpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), expect_mode=expect_mode)


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data, self.pos = data, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint ends prematurely")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)
