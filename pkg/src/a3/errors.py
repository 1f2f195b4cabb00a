"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration and format problems
exit 2, numeric aborts exit 3.
"""


class A3Error(Exception):
    """Base class for all package errors."""


class ShapeError(A3Error):
    """Operand shapes do not conform for the requested operation."""


class ContractError(A3Error):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(A3Error):
    """A configuration value is out of range, unknown, or inconsistent."""


class NumericError(A3Error):
    """A non-finite value appeared where finite math was required."""


class BudgetError(A3Error):
    """A core-set selection would exceed the remaining sampling budget."""


class FormatError(A3Error):
    """A serialized file is corrupt, truncated, or has a bad magic string."""
