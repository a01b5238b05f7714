"""Layered human/object decomposition of clothed-human scans on tetrahedral grids."""

__version__ = "0.1.0"
