"""Exception types raised across the package."""


class GrugError(Exception):
    """Base class for every error raised by grugraph."""


class DimensionError(GrugError, ValueError):
    pass


# Shape errors and dimension errors are the same failure seen from different callers.
ShapeError = DimensionError


class LabelError(GrugError, ValueError):
    pass


class EmptyBatchError(GrugError, ValueError):
    pass


class GraphIndexError(GrugError, IndexError):
    pass


class StateError(GrugError, RuntimeError):
    pass


class ParseError(GrugError, ValueError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class IntegrityError(GrugError, ValueError):
    pass


class ConfigError(GrugError, ValueError):
    pass


class SplitError(GrugError, ValueError):
    pass


class StratificationError(SplitError):
    pass


class NumericError(GrugError, FloatingPointError):
    pass


class MetricError(GrugError, ValueError):
    pass


class SamplingError(GrugError, ValueError):
    pass


class ProbeError(GrugError, ValueError):
    pass
