"""Desk-scale mixture-of-vision-experts routing and fusion toolkit."""

__version__ = "0.1.0"
