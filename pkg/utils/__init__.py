"""Utility modules for configuration and artifact storage."""
