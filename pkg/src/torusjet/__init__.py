"""Certified uniform transversality for sections of ample bundles on flat tori."""

from .geometry import GeometryContext, rescaled_distance

__all__ = ["GeometryContext", "rescaled_distance"]
__version__ = "0.1.0"
