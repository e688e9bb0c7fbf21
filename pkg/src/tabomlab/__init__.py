"""Toy laboratory for trajectory-aware training of masked diffusion language models."""

__version__ = "0.1.0"
