"""Lab modules."""
