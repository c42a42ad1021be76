"""Deterministic discrete-event network simulator and benchmark harness for holographic-type transports"""

__version__ = "1.0.0"
