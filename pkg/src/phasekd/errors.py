"""Exception types shared across the package."""


class PhaseKDError(Exception):
    """Base class for all package errors."""


class ShapeError(PhaseKDError, ValueError):
    pass


class ParameterError(PhaseKDError, ValueError):
    pass


class DomainError(PhaseKDError, ArithmeticError):
    pass


class StructureError(PhaseKDError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class LabelError(PhaseKDError, ValueError):
    pass


class SequenceLengthError(PhaseKDError, ValueError):
    pass


class ConfigError(PhaseKDError, ValueError):
    pass


class FormatError(PhaseKDError, ValueError):
    pass
