"""Hierarchical neural-code toolkit for controllable sketch-and-extrude CAD."""

__version__ = "0.1.0"
