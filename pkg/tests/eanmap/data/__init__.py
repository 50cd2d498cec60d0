"""Tests for eanmap.data."""
