"""Unit tests for the CAD predictor project."""
