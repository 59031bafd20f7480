"""Real-time 2D mitochondria segmentation for EM image stacks."""

__version__ = "0.1.0"
