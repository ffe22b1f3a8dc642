"""Mixed-precision bitwidth search with attribution-rank preservation."""

__version__ = "0.1.0"
