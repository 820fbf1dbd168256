"""Self-supervised correspondence flow: restricted-attention frame
reconstruction, recursive label propagation and evaluation metrics."""

__version__ = "0.1.0"
