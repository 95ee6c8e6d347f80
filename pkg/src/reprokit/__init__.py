"""Provenance capture, packaging and verification for computational experiments."""

__version__ = "0.1.0"
