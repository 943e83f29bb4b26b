"""Uplink optical-wireless indoor positioning from multipath impulse-response fingerprints."""

__version__ = "0.1.0"
