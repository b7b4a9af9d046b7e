"""Initialize API package."""
