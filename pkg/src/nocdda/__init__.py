"""Domain adaptation with class-conditional diffusion augmentation on small numpy models."""

__version__ = "0.1.0"
