"""Toy-scale laboratory for simplicity bias under GD and SAM and for
early-training upsampling of slow-learnable examples."""

__version__ = "0.1.0"
