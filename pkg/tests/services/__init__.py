"""Service layer tests package."""
