"""Triplet-trained convolutional patch descriptors: network, losses,
training loop and matching benchmarks."""

__version__ = "0.1.0"
