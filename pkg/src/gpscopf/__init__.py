"""Stability-constrained AC optimal power flow with GP rotor-angle surrogates."""

__version__ = "0.1.0"
