"""
urbanpulse: anomaly detection on per-antenna mobile network activity.
"""

__version__ = "0.1.0"
