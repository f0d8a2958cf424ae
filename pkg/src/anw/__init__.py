"""Hue-rotation watermarks that let an arbitrator detect training-data use."""

__version__ = "0.1.0"
