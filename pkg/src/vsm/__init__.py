"""Virtual sensor middleware for fog nodes."""

__version__ = "0.1.0"
