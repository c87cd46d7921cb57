"""Boundary-weighted segmentation of thin structures in 3D+time MRI."""

__version__ = "0.1.0"
