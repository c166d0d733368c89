"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class EcallError(Exception):
    exit_code = 1


class ConfigInvalid(EcallError):
    exit_code = 2


class DataError(EcallError, ValueError):
    exit_code = 3


class NumericalFailure(EcallError, ArithmeticError):
    exit_code = 4


class DimensionMismatch(DataError):
    pass


class KernelLargerThanImage(DataError):
    pass


class EvenSize(DataError):
    pass


class InvalidStd(DataError):
    pass


class InsufficientImages(DataError):
    pass


class EmptyCollection(DataError):
    pass


class ZeroKernel(DataError):
    pass


class ZeroTrueKernel(ZeroKernel):
    pass


class ImageTooSmall(DataError):
    pass


class NonNegligibleImaginaryPart(NumericalFailure):
    pass


class DegenerateDenominator(NumericalFailure):
    pass
