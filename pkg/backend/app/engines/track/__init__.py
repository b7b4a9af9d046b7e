"""Initialize track package."""
