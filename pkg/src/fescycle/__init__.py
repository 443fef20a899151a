"""FES-cycling control workbench."""
__version__ = "0.1.0"
