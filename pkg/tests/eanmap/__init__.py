"""Tests for the eanmap package."""
