"""Decoupled encoder-decoder / adversarial training and relative model scoring."""

__version__ = "0.1.0"
