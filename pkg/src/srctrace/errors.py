"""Exception hierarchy.

``DataError`` covers malformed inputs and configuration problems, while
``NumericError`` covers arithmetic blow-ups during training. The CLI maps
the two families to distinct exit codes.
"""


class SrcTraceError(Exception):
    pass


class DataError(SrcTraceError):
    pass


class NumericError(SrcTraceError):
    pass


class ZeroNormError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class NonFiniteInputError(DataError):
    pass


class DegenerateBatchError(DataError):
    pass


class InvalidScaleError(DataError):
    pass


class InvalidConfigError(DataError):
    pass


class ConfigConflictError(InvalidConfigError):
    pass


class InvalidSpecError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class TooFewClassesError(DataError):
    pass


class TooFewSamplesError(DataError):
    pass


class DegenerateSetError(DataError):
    pass


class StaleCacheError(DataError):
    pass


class OutOfRangeError(DataError):
    pass


class ManifestParseError(DataError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class DuplicateIdError(DataError):
    def __init__(self, sample_id: str, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"duplicate sample_id {sample_id!r}{where}")
        self.sample_id = sample_id


class FormatError(DataError):
    pass


class NonFiniteGradientError(NumericError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
