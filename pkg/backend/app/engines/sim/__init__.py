"""Initialize sim package."""
