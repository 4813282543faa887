"""Parabolic Monge-Ampere flow on almost Hermitian tori."""

__version__ = "0.1.0"
