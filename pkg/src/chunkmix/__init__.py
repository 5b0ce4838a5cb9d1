"""Chunked feature mixing autoencoders for unsupervised disentanglement."""

__version__ = "0.1.0"
