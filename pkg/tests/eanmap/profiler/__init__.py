"""Tests for eanmap.profiler."""
