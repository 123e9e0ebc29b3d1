"""Memorize, mine, trace and edit passwords in a small numpy transformer."""

__version__ = "0.1.0"
