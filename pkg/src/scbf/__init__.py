"""Spectral-Galerkin toolkit for 2D stochastic convective Brinkman-Forchheimer flow."""

__version__ = "0.1.0"
