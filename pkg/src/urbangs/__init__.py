"""Camera-only urban scene reconstruction with Gaussian splatting and joint depth refinement."""

__version__ = "0.1.0"
