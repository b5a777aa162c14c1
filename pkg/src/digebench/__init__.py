"""Desk-scale evaluation toolkit for patch-embedding pathology cohorts."""

__version__ = "0.1.0"
