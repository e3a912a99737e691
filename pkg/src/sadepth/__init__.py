"""Self-supervised monocular depth with self-attention and a discrete disparity volume."""

__version__ = "0.1.0"
