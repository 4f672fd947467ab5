"""Scan-cycle fingerprinting, watermarking and replay detection for PLC networks."""

__version__ = "0.1.0"
