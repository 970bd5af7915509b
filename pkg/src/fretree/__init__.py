"""Scenario trees from Fréchet quantizers, solved by backward dynamic programming."""

__version__ = "0.1.0"
