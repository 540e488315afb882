"""Reversible KAM engine for coupled nonlinear Schrodinger lattices on the d-torus."""

__version__ = "0.1.0"
