"""Quantization-aware training and fixed-point inference for a time-series transformer."""

__version__ = "0.1.0"
