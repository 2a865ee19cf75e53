"""Duplication-history reconstruction for gene cluster regions."""

__version__ = "0.1.0"
