"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes; library code raises them directly.
"""


class UsageError(ValueError):
    """Bad arguments or flag combinations (exit code 1)."""


class DataError(ValueError):
    """Missing, malformed, or inconsistent input data (exit code 2)."""


class NumericalError(ArithmeticError):
    """Non-finite values where finite ones are required (exit code 3)."""
