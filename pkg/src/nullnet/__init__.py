"""Classifiers with a NULL output, transfer attacks, and their evaluation."""

__version__ = "0.1.0"
