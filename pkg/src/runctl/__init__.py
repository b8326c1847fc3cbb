"""Distributed run-control and monitoring framework."""

__version__ = "0.1.0"
