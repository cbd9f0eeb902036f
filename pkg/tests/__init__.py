"""Test suite for the RGBA video lab."""
