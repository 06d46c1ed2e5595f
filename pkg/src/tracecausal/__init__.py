"""Causal analysis of run-to-run performance variability in GPU traces."""

__version__ = "0.1.0"
