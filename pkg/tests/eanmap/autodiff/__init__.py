"""Tests for eanmap.autodiff."""
