"""Initialize app package."""
