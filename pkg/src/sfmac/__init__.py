"""Doubly randomized random multiple access with success/failure feedback."""
__version__ = "0.1.0"
