"""Simulation and analysis of blinking NV-center super-resolution imaging."""

__version__ = "0.1.0"
