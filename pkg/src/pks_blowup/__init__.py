"""Blow-up profiles, modulation dynamics and spectral checks for radial Patlak-Keller-Segel."""

__version__ = "0.1.0"
