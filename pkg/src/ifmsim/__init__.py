"""Polarized neutron interferometer simulator: spin-path Bell-like state,
detector counts, fringe fitting and the CHSH S-value."""

__version__ = "0.1.0"
