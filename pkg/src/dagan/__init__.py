"""Cycle-consistent pixel-level domain adaptation for object detection."""

__version__ = "0.1.0"
