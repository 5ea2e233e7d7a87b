"""Actor-context graph convolutional head for weakly-supervised action detection."""

__version__ = "0.1.0"
