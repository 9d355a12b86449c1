"""Network-masked reconstruction modeling for parcellated recordings."""

__version__ = "0.1.0"
