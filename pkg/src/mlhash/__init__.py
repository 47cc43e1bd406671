"""Dual-branch mutual-learning hashing with a mixture of hash experts."""

__version__ = "0.1.0"
