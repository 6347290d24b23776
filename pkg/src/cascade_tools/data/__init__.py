"""Bundled device configurations and reference tables."""
