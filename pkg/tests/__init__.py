"""Test suite for atom-steering."""
