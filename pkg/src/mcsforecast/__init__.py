"""Per-MCS success-probability forecasting for broadcast link adaptation."""

__version__ = "0.1.0"
