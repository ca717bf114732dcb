"""Dynamic parameter identification for fully parallel robots."""

__version__ = "0.1.0"
