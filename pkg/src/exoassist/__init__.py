"""Desk-scale simulator for semantic-aware upper-limb exoskeleton assistance."""

__version__ = "0.1.0"
