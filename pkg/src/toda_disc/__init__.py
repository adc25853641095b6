"""Toda-type Hitchin equations on the unit disc with subharmonic weights."""

__version__ = "0.1.0"
