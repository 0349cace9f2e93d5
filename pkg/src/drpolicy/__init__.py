"""Policy learning with cross-fitted doubly robust scores and exact tree search."""

__version__ = "0.1.0"
