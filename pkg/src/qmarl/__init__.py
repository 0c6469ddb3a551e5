"""Decentralized quantized Q-learning for stochastic games on continuous state spaces."""

__version__ = "0.1.0"
