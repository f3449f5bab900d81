"""Discrete-event simulation of urgency-aware GPU kernel-launch scheduling."""

__version__ = "0.1.0"
