"""Exception hierarchy shared across the package.

Three base classes map onto the CLI exit codes: ``UserError`` -> 1,
``DataError`` -> 2, ``InternalError`` -> 3.
"""


class SomnoscoreError(Exception):
    """Base class for all package errors."""


class UserError(SomnoscoreError):
    """Bad invocation or configuration supplied by the user."""


class DataError(SomnoscoreError):
    """Input data violates the format or content it claims to have."""


class InternalError(SomnoscoreError):
    """An internal invariant was violated; indicates a bug."""


# --- EDF parsing / writing ---

class TruncatedFile(DataError):
    """Byte count of an EDF stream is inconsistent with its header."""


class MalformedHeader(DataError):
    """A numeric EDF header field does not parse as a number."""


class BadScaling(DataError):
    """digital_max == digital_min, so samples cannot be scaled."""


class RangeOverflow(DataError):
    """A physical sample lies outside the declared physical range."""


class MissingChannel(DataError):
    """One or more requested montage channels are absent from a recording."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"missing channels: {', '.join(self.missing)}")


class EmptySignal(DataError):
    """A signal operation received zero samples."""


class UnalignedAnnotation(DataError):
    """A stage annotation onset is too far off the 30 s grid to repair."""


# --- dataset / splits ---

class EmptyCohort(DataError):
    """No patients available to split or ingest."""


class EmptySplit(DataError):
    """A required dataset split contains no epochs."""


# --- numerics ---

class ShapeMismatch(InternalError):
    """Tensor operands have incompatible shapes."""


class NonScalarLoss(InternalError):
    """backward() was called on a non-scalar value."""


class BadLabel(DataError):
    """A stage label is outside the valid range 0..4."""


class DivergedLoss(InternalError):
    """Training loss became non-finite."""


# --- checkpoints / configuration ---

class CorruptCheckpoint(DataError):
    """Checkpoint file has a bad magic, version, or length."""


class ConfigMismatch(UserError):
    """Resumed run configuration differs from the checkpointed one."""


class ConfigError(UserError):
    """Invalid run configuration value or key."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


# --- evaluation ---

class LengthMismatch(InternalError):
    """Prediction and truth label arrays differ in length."""


class EmptyMatrix(DataError):
    """Metrics were requested for a confusion matrix with zero total."""


class MissingMeta(DataError):
    """An epoch lacks the subject metadata required for stratification."""


class UnknownChannel(UserError):
    """A channel name does not belong to the seven-channel montage."""
