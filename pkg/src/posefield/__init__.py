"""Joint camera-pose and radiance-field refinement from sparse views."""

__version__ = "0.1.0"
