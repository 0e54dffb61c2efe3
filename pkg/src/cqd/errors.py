"""Exception hierarchy shared across the package."""


class CQDError(Exception):
    """Base class for all package errors."""


class ContractError(CQDError, ValueError):
    """A precondition on shapes, arguments or configuration was violated."""


class NumericDomainError(CQDError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class BackwardStateError(CQDError, RuntimeError):
    """Backward was requested on a graph that has already been consumed."""


class ConfigError(ContractError):
    """An experiment or training configuration is invalid."""


class CheckpointError(CQDError, IOError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or an unparseable header."""


class CheckpointVersionError(CheckpointError):
    """The file was written by an unsupported format version."""


class CheckpointPayloadError(CheckpointError):
    """Tensor payload is truncated or disagrees with the header."""
