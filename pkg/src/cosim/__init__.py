"""Explicit co-simulation of coupled ODE subsystems."""

__version__ = "0.1.0"
