"""Rigid-body Stokes mobility solver on spherical-harmonic surfaces."""

__version__ = "0.1.0"
