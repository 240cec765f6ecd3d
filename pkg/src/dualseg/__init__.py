"""Dual-subnet semi-supervised 3D segmentation with pseudo-label filtering and prototype contrast."""

__version__ = "0.1.0"
