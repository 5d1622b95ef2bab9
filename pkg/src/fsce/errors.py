"""Exception taxonomy.

Everything raised on purpose derives from FsceError so callers can catch
one type at the CLI boundary. All of these are ValueError subclasses:
they signal that a caller handed us something unusable, not that the
library is broken.
"""


class FsceError(ValueError):
    """Base class for all errors raised by this package."""


class ConfigError(FsceError):
    """Bad build-time choice: unknown key, invalid hyperparameter, odd split."""


class ShapeError(FsceError):
    """Array rank/dimension mismatch detected before any arithmetic runs."""


class ContractError(FsceError):
    """A documented runtime pre/post-condition was violated."""


class DegenerateStatsError(ContractError):
    """Statistics requested over a sample too small or constant to define them."""


class DataError(FsceError):
    """Dataset content is invalid (bad label, bad pixel range, bad count)."""


class FormatError(FsceError):
    """A serialized file does not match its documented byte layout."""


class TrainingDivergedError(FsceError):
    """Loss became non-finite; carries the epoch/step where it happened."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
