"""Simulator and analysis toolkit for a classical stochastic circuit with emergent Schrodinger dynamics."""

__version__ = "0.1.0"
