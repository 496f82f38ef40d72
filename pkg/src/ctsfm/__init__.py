"""Continuous-time rolling-shutter structure from motion with splines on R3+SO(3) and SE(3)."""

__version__ = "0.1.0"
