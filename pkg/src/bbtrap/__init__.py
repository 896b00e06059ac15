"""Crossed-vortex bottle beam trap simulation for single Cs atoms."""

__version__ = "0.1.0"
