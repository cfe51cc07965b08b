"""Partial multi-label learning with an adversarial encoder-decoder (PML-GAN)."""

__version__ = "0.1.0"
