"""Initialize engines package."""
