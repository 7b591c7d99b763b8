"""Tests for dualflow-vo."""
