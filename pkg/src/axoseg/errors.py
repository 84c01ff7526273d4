"""Exception hierarchy shared across the toolkit.

Everything raised on purpose derives from AxosegError so the CLI can map
failures to a single exit code. ContractViolation covers precondition and
shape violations; DataError and its subclasses cover dataset problems and
always name the offending sample or file.
"""


class AxosegError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(AxosegError):
    """A documented precondition was violated by the caller."""


class ConfigError(AxosegError):
    """An invalid configuration value (network, tiling, training)."""


class DataError(AxosegError):
    """Base class for dataset/manifest problems."""


class MissingFileError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class NonBinaryMaskError(DataError):
    pass


class OverlappingMasksError(DataError):
    pass


class DuplicateSampleError(DataError):
    pass


class EmptyValidationPoolError(DataError):
    """A source contributes no validation samples, so the aggregated
    validation set cannot represent every source."""


class PackingError(AxosegError):
    """Synthetic generator could not place the requested objects without
    overlap within the retry budget."""


class CheckpointError(AxosegError):
    """Base class for checkpoint (de)serialization failures."""


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class TrainingDivergedError(AxosegError):
    """Loss became non-finite; message carries epoch/step context."""
