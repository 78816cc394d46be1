"""Dynamic radiance fields built from temporally partitioned 4D feature grids."""

__version__ = "0.1.0"
