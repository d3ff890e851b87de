"""Simulation of quench thermalization in Rydberg atom chains."""

__version__ = "0.1.0"
