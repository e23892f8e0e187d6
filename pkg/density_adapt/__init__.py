"""density-adapt - crowd counting with multi-level feature-aware adaptation."""

__version__ = "0.1.0"
