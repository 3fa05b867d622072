"""Byte-token temporal point process language modelling at desk scale."""

__version__ = "0.1.0"
