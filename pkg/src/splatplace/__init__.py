"""Text-driven object insertion into 3D Gaussian splat scenes."""

__version__ = "0.1.0"
