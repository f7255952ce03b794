"""Domain model tests package."""
