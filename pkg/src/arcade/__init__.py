"""Coverage anomaly detection from georeferenced RSRP samples."""

__version__ = "0.1.0"
