"""Desk-scale channel-grouped 3D lane detection in bird's-eye view."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
