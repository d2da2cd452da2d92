"""Deterministic simulator and protocol library for clustered wireless backhaul links."""

__version__ = "0.1.0"
