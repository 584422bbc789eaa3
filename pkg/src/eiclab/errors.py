"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
ShapeError / FormatError / DataError / ContractError / SpecificationError -> 3,
NumericalAbort -> 4.
"""


class EICLabError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EICLabError):
    """Tensor dimension or arity mismatch. Messages name the offending axis."""


class GraphError(EICLabError):
    """Autodiff misuse, e.g. backward() from a non-scalar."""


class ContractError(EICLabError):
    """A call contract was violated (value range, frozen flag, negative loss term)."""


class SpecificationError(EICLabError):
    """Invalid synthetic-motion geometry (object does not fit, speed too high)."""


class ConfigError(EICLabError):
    """Bad config file or flag combination."""


class FormatError(EICLabError):
    """Malformed .eicv / .eick file. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(EICLabError):
    """Dataset / checkpoint incompatibility discovered at run time."""


class NumericalAbort(EICLabError):
    """Training hit a non-finite loss; the last good checkpoint is kept."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
