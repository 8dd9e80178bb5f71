"""Hierarchical histopathology patch classification: preprocessing, patch filtering,
a numpy network core, random multimodel ensembles, two-level inference and metrics."""

__version__ = "0.1.0"
