"""crossfuse: small-data sensor+image fusion with complementarity regularization."""

__version__ = "0.1.0"
