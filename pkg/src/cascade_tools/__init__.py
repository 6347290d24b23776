"""Cascade Tools - simulation and analysis for quantum-dot entangled photon pair sources."""

__version__ = "0.1.0"
