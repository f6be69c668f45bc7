"""Figure regeneration from sweep CSV and threshold JSON files."""

__version__ = "0.1.0"
