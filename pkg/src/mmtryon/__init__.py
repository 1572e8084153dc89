"""Desk-scale multi-modal, multi-reference virtual try-on with latent diffusion."""
__version__ = "0.1.0"
