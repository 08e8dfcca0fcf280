"""Single-image to conditional radiance field: encoder, renderer, losses, training and evaluation."""

__version__ = "0.1.0"
