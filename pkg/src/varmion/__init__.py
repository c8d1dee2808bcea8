"""Stokes flow data generation and a variationally structured operator network."""

__version__ = "0.1.0"
