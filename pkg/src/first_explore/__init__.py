"""Separate explore and exploit policies for meta-RL, combined after training."""

__version__ = "0.1.0"
