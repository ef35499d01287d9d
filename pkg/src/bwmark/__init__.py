"""Bandwidth-watermark simulation, selective-scan flow detection and correlation modeling."""

__version__ = "0.1.0"
