"""Desk-scale GRPO with adaptive heuristic-hint rollouts and training-affinity metrics."""

__version__ = "0.1.0"
