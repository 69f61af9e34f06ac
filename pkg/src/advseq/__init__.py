"""Adversarial augmentation for sequence-to-sequence training and a word-swap robustness attack."""

__version__ = "0.1.0"
