"""Desk-scale lab for rank-1 structure in RL-with-verifiable-rewards weight updates."""

__version__ = "0.1.0"
