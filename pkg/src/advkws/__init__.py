"""SVDF keyword spotting with domain-adversarial training on a toy two-domain corpus."""

__version__ = "0.1.0"
