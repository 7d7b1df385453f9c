"""Symbolic policy distillation."""
