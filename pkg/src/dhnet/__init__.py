"""Thermo-hydraulic simulation of district heating networks as semi-explicit DAEs."""

__version__ = "0.1.0"
