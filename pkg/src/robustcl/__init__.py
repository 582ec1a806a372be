"""Desk-scale laboratory for robust contrastive representation learning."""

__version__ = "0.1.0"
