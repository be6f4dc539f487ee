class FieldSynthError(Exception):
    """Base class for all errors raised by the synthesis pipeline."""


class ArgumentError(FieldSynthError, ValueError):
    """Invalid argument or inconsistent inputs."""


class NiftiFormatError(ArgumentError):
    """File is not a NIfTI-1 volume."""


class UnsupportedVolumeError(ArgumentError):
    """NIfTI-1 variant, datatype or dimensionality that is not handled."""


class VolumeIOError(FieldSynthError, OSError):
    """Reading or writing volume data failed."""


class DegenerateInputError(FieldSynthError, ValueError):
    """Input is well-formed but the requested quantity is undefined for it."""


class NumericalError(FieldSynthError, ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingDivergedError(NumericalError):
    def __init__(self, message, history, diagnostics=None):
        super().__init__(message, diagnostics)
        self.history = history
