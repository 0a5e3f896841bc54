"""Desk-scale software twin of a modular tactile-display control stack."""

__version__ = "0.1.0"
