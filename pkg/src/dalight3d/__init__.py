"""DALight-3D: a lightweight volumetric segmentation network on a float64 numpy engine."""

__version__ = "0.1.0"
