"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries one.
"""


class DSDError(Exception):
    exit_code = 2


class ConfigError(DSDError, ValueError):
    """Invalid configuration, rejected before any training starts."""

    exit_code = 1


class ShapeError(DSDError, ValueError):
    """Operand dimensions do not agree."""


class ContractError(DSDError, ValueError):
    """A caller violated a documented precondition."""


class NumericError(DSDError, ArithmeticError):
    """A NaN or Inf appeared in a loss, gradient or parameter."""


class DataFormatError(DSDError, ValueError):
    """Malformed dataset file or inconsistent labels."""


class CheckpointError(DSDError, IOError):
    """Unreadable, truncated or incompatible checkpoint file."""


class MissingArtifactError(DSDError, FileNotFoundError):
    """A run directory lacks files a command needs."""


class FairnessError(DSDError):
    """Paired DSD and LLR arms do not have equal epoch budgets."""

    exit_code = 3
