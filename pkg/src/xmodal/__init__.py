"""Desk-scale self-supervised translation between image and text embedding spaces."""

__version__ = "0.1.0"
