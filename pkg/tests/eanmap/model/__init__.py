"""Tests for eanmap.model."""
