"""Micro-factorized convolutions, dynamic shift-max and the networks built from them."""

__version__ = "0.1.0"
