"""Rotation-equivariant visual place recognition on synthetic aerial imagery."""

__version__ = "0.1.0"
