"""Simulation lab for host-estimation collusion attacks on fingerprinting codes."""

__version__ = "0.1.0"
