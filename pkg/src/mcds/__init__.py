"""Manipulation-concept discovery from multi-modal demonstrations, and policies that use the concepts."""

__version__ = "0.1.0"
