"""Initialize core package."""
