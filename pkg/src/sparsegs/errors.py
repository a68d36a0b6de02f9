"""Exception hierarchy shared by every module."""


class SparseGSError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(SparseGSError, ValueError):
    pass


class LengthMismatch(SparseGSError, ValueError):
    pass


class ValueRange(SparseGSError, ValueError):
    pass


class SingularFootprint(SparseGSError, ArithmeticError):
    """A projected 2D covariance could not be inverted even after regularization."""


class DegenerateInput(SparseGSError, ValueError):
    pass


class DegenerateTrajectory(SparseGSError, ValueError):
    pass


class TooFewCameras(SparseGSError, ValueError):
    pass


class EmptyCloud(SparseGSError, ValueError):
    pass


class EmptyPointCloud(SparseGSError, ValueError):
    pass


class NoViews(SparseGSError, ValueError):
    pass


class UnsupportedOption(SparseGSError, NotImplementedError):
    pass


# -- codec errors -------------------------------------------------------------


class MalformedHeader(SparseGSError, ValueError):
    pass


class TruncatedData(MalformedHeader):
    """File body is shorter than its header promises."""


class UnsupportedFormat(SparseGSError, ValueError):
    pass


class MissingProperty(SparseGSError, KeyError):
    pass


class NonFiniteScale(SparseGSError, ValueError):
    pass


class SchemaError(SparseGSError, ValueError):
    pass


class NonOrthonormalRotation(SparseGSError, ValueError):
    pass
