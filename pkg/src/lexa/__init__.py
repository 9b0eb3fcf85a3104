"""Latent explorer/achiever agent on toy pixel environments."""

__version__ = "0.1.0"
