"""Predictive coding networks: PC, Z-IL, incremental PC and backprop."""

__version__ = "0.1.0"
