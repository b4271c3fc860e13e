"""Certified reduced-order models for constrained optimal control of
stationary Maxwell systems with Whitney edge elements."""

__version__ = "0.1.0"
