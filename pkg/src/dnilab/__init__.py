"""Measurement invasiveness and memory effects in dephasing open quantum systems."""

__version__ = "0.1.0"
