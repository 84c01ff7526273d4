"""axoseg: multi-domain axon/myelin segmentation on plain numpy.

Train small U-Nets on histology patches from several imaging modalities,
pool them into a single generalist model, and compare the two regimes with
matched evaluation, tiled inference, ensembling, and morphometry.

Submodules import lazily so the command-line entry point can configure
BLAS threading before numpy first loads.
"""

from .errors import (
    AxosegError,
    BadMagicError,
    BadVersionError,
    CheckpointError,
    ConfigError,
    ContractViolation,
    DataError,
    DimensionMismatchError,
    DuplicateSampleError,
    EmptyValidationPoolError,
    MissingFileError,
    NonBinaryMaskError,
    OverlappingMasksError,
    PackingError,
    TrainingDivergedError,
    TruncatedCheckpointError,
)

__version__ = "0.1.0"

_SUBMODULES = (
    "cli",
    "datahub",
    "infer",
    "kernels",
    "metrics",
    "morpho",
    "pipeline",
    "synthgen",
    "tensor",
    "trainer",
    "unet",
)

_LAZY_ATTRS = {"Tensor": "tensor", "LayerParams": "tensor"}


def __getattr__(name):
    import importlib

    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    if name in _LAZY_ATTRS:
        module = importlib.import_module(f".{_LAZY_ATTRS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_SUBMODULES) | set(_LAZY_ATTRS))


__all__ = [
    "AxosegError",
    "BadMagicError",
    "BadVersionError",
    "CheckpointError",
    "ConfigError",
    "ContractViolation",
    "DataError",
    "DimensionMismatchError",
    "DuplicateSampleError",
    "EmptyValidationPoolError",
    "MissingFileError",
    "NonBinaryMaskError",
    "OverlappingMasksError",
    "PackingError",
    "TrainingDivergedError",
    "TruncatedCheckpointError",
    "__version__",
]
