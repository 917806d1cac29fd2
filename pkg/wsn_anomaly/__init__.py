"""
Spatiotemporal anomaly detection for wireless sensor networks.
"""
__version__ = "0.1.0"
