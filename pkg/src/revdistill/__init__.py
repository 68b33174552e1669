"""Unsupervised anomaly detection and localisation with a frozen teacher and a mirrored student decoder."""

__version__ = "0.1.0"
