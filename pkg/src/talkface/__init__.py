"""Desk-scale audio-driven talking-face generation."""

__version__ = "0.1.0"
