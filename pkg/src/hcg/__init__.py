"""Hierarchical latent-plan learning for target-driven grasping in planar clutter."""

__version__ = "0.1.0"
