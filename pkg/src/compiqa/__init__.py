"""Full-reference quality assessment for compressed images."""

__version__ = "0.1.0"
