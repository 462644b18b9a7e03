"""Transition pathways through the landscapes of score-based generative models."""

__version__ = "0.1.0"
