"""Coronary artery disease prediction from metabolomic cohort tables."""

__version__ = "0.1.0"
