"""Configuration tests package."""
