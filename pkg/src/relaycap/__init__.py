"""Relay capacity estimation with dual probing, and a round-based simulator to compare estimators."""

__version__ = "0.1.0"
