"""Differentiable 2D fluid / rigid-body simulation for training neural controllers."""

from . import autodiff, fluid, rigid_body

__version__ = "0.1.0"
