"""Tests for cascade-tools."""
