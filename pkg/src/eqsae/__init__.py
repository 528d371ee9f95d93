"""Adaptively equivariant sparse autoencoders on a C4-symmetric shape dataset."""

__version__ = "0.1.0"
