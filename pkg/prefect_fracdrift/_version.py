"""Version of the prefect-fracdrift collection."""

__version__ = "0.1.0"
