"""Tests for eanmap."""
