"""Kinetic boundary layers with geometric correction: operators, solvers and probes."""
__version__ = "0.1.0"
