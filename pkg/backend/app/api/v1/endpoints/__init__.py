"""Initialize endpoints package."""
