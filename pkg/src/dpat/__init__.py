"""Dual-prompt adapter tuning for continual video recognition on a frozen ViT."""

__version__ = "0.1.0"
