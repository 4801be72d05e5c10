"""Inverse scene text removal: tell whether text was erased from an image,
where it was, and whether it can be read back."""

__version__ = "0.1.0"
