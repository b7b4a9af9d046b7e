"""Initialize rl package."""
