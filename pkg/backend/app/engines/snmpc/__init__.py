"""Initialize snmpc package."""
