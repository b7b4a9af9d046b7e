"""Initialize uncertainty package."""
