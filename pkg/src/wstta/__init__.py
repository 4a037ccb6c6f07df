"""Streaming weakly supervised test-time adaptation for a mini two-stage detector."""

__version__ = "0.1.0"
