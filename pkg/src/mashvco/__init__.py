"""Behavioral simulation and calibration of 1-1 MASH VCO-based ADCs."""

__version__ = "0.1.0"
