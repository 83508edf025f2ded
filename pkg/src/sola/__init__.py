"""Local-anomaly detection of blended image forgeries."""

__version__ = "0.1.0"
