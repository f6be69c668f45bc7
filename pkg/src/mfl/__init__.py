"""Mean field, TAP/AMP and state evolution for a Gaussian topic model."""

__version__ = "0.1.0"
