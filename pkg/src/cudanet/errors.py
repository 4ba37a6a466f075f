"""Exception hierarchy shared by the library and the command line tool.

Every error that can surface at the CLI boundary carries an ``exit_code``
so the tool maps failures onto a stable contract:

* 2 -- configuration problems (bad keys, invalid parameter values)
* 3 -- data problems (malformed datasets, labels, checkpoints, shapes)
* 4 -- numerical failures (NaN/Inf losses, degenerate feature vectors)
* 5 -- missing prerequisites (dataset or checkpoint not produced yet)
"""

from __future__ import annotations


class CudanetError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(CudanetError):
    """Invalid configuration: unknown keys, out-of-range or non-finite values."""

    exit_code = 2


class DataError(CudanetError):
    """Malformed or inconsistent data on disk or in memory."""

    exit_code = 3


class ShapeError(DataError):
    """Tensor/array shapes incompatible with an operation's contract."""

    exit_code = 3


class UndefinedLossError(DataError):
    """A loss or metric is undefined for the given inputs (e.g. no valid pixels)."""

    exit_code = 3


class NumericalError(CudanetError):
    """Non-finite values where finite ones are required."""

    exit_code = 4


class MissingPrerequisiteError(CudanetError):
    """A required artifact (dataset, checkpoint) does not exist yet."""

    exit_code = 5


class PipelineError(CudanetError):
    """Stage sequencing or freeze-schedule contract violated."""

    exit_code = 5
