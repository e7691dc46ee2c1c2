"""Trajectory-driven expert pruning for toy mixture-of-experts models."""

__version__ = "0.1.0"
