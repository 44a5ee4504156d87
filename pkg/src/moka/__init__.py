"""Multimodal low-rank adaptation on a frozen toy network."""

__version__ = "0.1.0"
