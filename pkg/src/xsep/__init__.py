"""Trainable multi-source separation with multi-domain loss, bridging and combination loss."""

__version__ = "0.1.0"
