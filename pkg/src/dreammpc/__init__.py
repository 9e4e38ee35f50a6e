"""Constrained sampling-based planning over a learned proprioceptive world model."""

__version__ = "0.1.0"
