"""Image-free super-resolution by learning the inverse of Gaussian blur kernels."""

__version__ = "0.1.0"
