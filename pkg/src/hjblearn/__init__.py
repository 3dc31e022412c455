"""Learned initial costates for indirect optimal-control shooting."""

__version__ = "0.1.0"
