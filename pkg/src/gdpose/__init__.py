"""Multi-view camera pose regression with graph neural diffusion."""

__version__ = "0.1.0"
