"""Exception types shared across the package.

ContractError maps to CLI exit code 2, NumericalAbort to exit code 3.
"""


class ContractError(ValueError):
    """An input violates a documented precondition or shape contract."""


class NumericalAbort(RuntimeError):
    """A computation produced NaN/Inf and cannot continue."""


class CheckpointError(IOError):
    """A checkpoint file is unreadable, truncated, or version-incompatible."""


class NoFreespacePixels(ContractError):
    """A pixel set expected to be nonempty was empty."""
