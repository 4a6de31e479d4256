"""Toy-training acceptance runs (slow)."""
