"""Reset-free guided policy search on toy reaching tasks."""

__version__ = "0.1.0"
