"""Bidirectional trajectory diffusion augmentation for offline RL on toy MDPs."""

__version__ = "0.1.0"
