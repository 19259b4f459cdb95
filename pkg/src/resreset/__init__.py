"""Simulation and Powell optimization of readout-resonator photon depletion."""

__version__ = "0.1.0"
