"""Spillage-aware guided diffusion trajectory generation for granular scooping."""

__version__ = "0.1.0"
