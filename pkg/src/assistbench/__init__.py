"""Trace-replay benchmark for the energy and latency of code-assistant inference servers."""

__version__ = "0.1.0"
