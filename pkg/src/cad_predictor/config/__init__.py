"""Configuration models and the YAML/environment loader."""
