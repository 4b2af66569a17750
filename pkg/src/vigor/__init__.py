"""Iterative hidden-confounder generation and validation with a causal effect VAE."""

__version__ = "0.1.0"
