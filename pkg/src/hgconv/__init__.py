"""Heterogeneous graph learning with hybrid relation-level and
cross-relation attention convolutions."""

__version__ = "0.1.0"
