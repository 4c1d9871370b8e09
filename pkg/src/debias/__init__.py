"""Targeted contrastive unlearning of background bias, with LIME difference maps."""

__version__ = "0.1.0"
