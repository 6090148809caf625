"""Dependency-aware structured filter pruning with automatic sparsity control."""

__version__ = "0.1.0"
