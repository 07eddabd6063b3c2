"""Frame-to-GPS retrieval for video geolocalization."""

__version__ = "0.1.0"
