"""Chance-constrained PV hosting capacity of radial distribution feeders."""
__version__ = "0.1.0"
