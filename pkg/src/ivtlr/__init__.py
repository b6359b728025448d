"""Tiny multimodal transformer with interleaved vision-text latent reasoning."""

__version__ = "0.1.0"
