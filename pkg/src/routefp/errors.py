"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: invalid config/input/request -> 2,
training divergence -> 3, OS-level I/O failures -> 4.
"""


class RoutefpError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(RoutefpError, ValueError):
    """An operation received values violating its preconditions."""


class InvalidConfigError(RoutefpError, ValueError):
    """A configuration value or config file is malformed."""


class InvalidRequestError(RoutefpError, ValueError):
    """A well-formed but unsatisfiable request (unknown id, oversized slice)."""


class TrainingDivergedError(RoutefpError, RuntimeError):
    """A training loop produced non-finite loss."""
