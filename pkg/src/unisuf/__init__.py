"""Executable UniSUF update-protocol simulator with adversary and trace verifier."""

__version__ = "0.1.0"
