"""Group-relative policy optimization with structured emotional reasoning traces."""

__version__ = "0.1.0"
