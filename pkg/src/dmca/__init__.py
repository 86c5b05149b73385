"""Decentralized multi-robot navigation with learned selective communication."""

__version__ = "0.1.0"
