"""Decoupled input/output embedding laboratory for masked-LM encoders."""

__version__ = "0.1.0"
