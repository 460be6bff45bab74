"""Attention-guided contrastive CNN for three-class chest X-ray recognition."""

__version__ = "0.1.0"
