"""Parameter-efficient personalization of a desk-scale 3D-aware generator."""

__version__ = "0.1.0"
