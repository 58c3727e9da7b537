"""Tensor-train ConvLSTM forecasting with latent physics constraints."""

__version__ = "0.1.0"
