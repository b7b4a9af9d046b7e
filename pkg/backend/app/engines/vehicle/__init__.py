"""Initialize vehicle package."""
