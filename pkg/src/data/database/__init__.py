"""Frame storage."""
