"""Exception hierarchy.

``DataError`` covers malformed or inconsistent inputs (CLI exit code 2);
``NumericError`` covers numerical breakdowns during computation (exit code 3).
"""


class LesionKitError(Exception):
    pass


class DataError(LesionKitError, ValueError):
    pass


class NumericError(LesionKitError, ArithmeticError):
    pass


# volgrid
class MalformedHeader(DataError):
    pass


class LengthMismatch(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class OversizeGrid(DataError):
    pass


# preprocess
class SeedOutOfBounds(DataError):
    pass


class EmptyRegion(DataError):
    pass


class TooFewCases(DataError):
    pass


# augment
class MissingModality(DataError):
    pass


# xmasnet
class ShapeMismatch(DataError):
    pass


class DegenerateBatch(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class VersionMismatch(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


# radiomics
class NoValidPairs(DataError):
    pass


# gbm
class FeatureCountMismatch(DataError):
    pass


class TooFewSamples(DataError):
    pass


class DegenerateLabels(UserWarning):
    """Warning: a boosted model was fit on single-class labels."""


# ensemble / metrics
class SingleClassLabels(DataError):
    pass


class UnknownModelId(DataError):
    pass


class EmptyGroup(DataError):
    pass
