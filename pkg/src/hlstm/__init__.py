"""Gap-aware sequence learning for sparsely observed gridded soil-moisture series."""

__version__ = "0.1.0"
