"""Shared exception types."""


class NumericError(RuntimeError):
    """Linear-algebra failure that survived the ridge fallback."""
