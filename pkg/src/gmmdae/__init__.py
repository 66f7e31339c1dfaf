"""Unsupervised video anomaly detection with denoising autoencoders and latent GMMs."""

__version__ = "0.1.0"
