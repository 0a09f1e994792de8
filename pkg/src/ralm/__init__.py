"""Retrieval-augmented masked language model pre-training on a from-scratch
numpy autodiff engine."""

__version__ = "0.1.0"
