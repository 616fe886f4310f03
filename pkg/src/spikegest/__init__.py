"""Spiking gesture recognition with Jaccard attention and source-free adaptation."""

__version__ = "0.1.0"
