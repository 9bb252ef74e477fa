"""Exception types shared across the package.

Each maps to a CLI exit code: usage errors exit 1, data errors 2,
numerical failures 3, check-suite failures 4.
"""


class UsageError(Exception):
    """Bad command line, malformed config, unknown or missing keys."""


class DataError(Exception):
    """Unreadable, truncated or inconsistent data/checkpoint files."""


class NumericalError(Exception):
    """Non-finite state, failed decomposition, or a malformed grid."""


class CheckFailure(Exception):
    """One or more built-in property checks failed."""
