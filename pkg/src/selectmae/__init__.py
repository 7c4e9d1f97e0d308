"""Adaptive-token-selection masked-autoencoder pretraining for video."""

__version__ = "0.1.0"
