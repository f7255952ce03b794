"""
Test package for the CAD predictor.

Tests are organized by layer: configuration, domain models, modelling
services, utilities, and end-to-end pipeline and CLI runs.
"""
