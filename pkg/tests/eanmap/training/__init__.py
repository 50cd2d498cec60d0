"""Tests for eanmap.training."""
