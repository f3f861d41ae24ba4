"""Fourier-attentive few-shot adaptation of a toy dual-encoder model."""

__version__ = "0.1.0"
