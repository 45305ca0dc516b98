"""Desk-scale simulator for split, SplitFed, sharded and blockchain-enabled
SplitFed learning."""

__version__ = "0.1.0"
