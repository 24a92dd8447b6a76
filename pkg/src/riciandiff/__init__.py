"""Rician-noise-aware denoising diffusion for low-SNR magnitude images."""

__version__ = "0.1.0"
