"""Simulator-guided ECG beat synthesis and classification toolkit."""

__version__ = "0.1.0"
