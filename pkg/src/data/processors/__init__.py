"""Patch tokenisation and matte preprocessing."""
