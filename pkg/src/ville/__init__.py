"""Toy unified generative + embedding video-language model."""

__version__ = "0.1.0"
