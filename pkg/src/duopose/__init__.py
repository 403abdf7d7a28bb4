"""Physics-aware reconstruction of two closely interacting people."""

__version__ = "0.1.0"
