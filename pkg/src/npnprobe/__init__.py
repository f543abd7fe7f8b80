"""Layer-wise probing of encoder representations for Italian NPN constructions."""

__version__ = "0.1.0"
