from __future__ import annotations


class LabError(Exception):
    """Base class for every failure raised by the lab."""


class InvalidParameter(LabError, ValueError):
    pass


class ConfigError(LabError, ValueError):
    def __init__(self, message: str, field_errors: list[str] | None = None) -> None:
        self.field_errors = field_errors or []
        detail = "\n".join(f"  {line}" for line in self.field_errors)
        super().__init__(f"{message}\n{detail}" if detail else message)


class ZeroNormRow(LabError, ValueError):
    def __init__(self, row: int) -> None:
        self.row = row
        super().__init__(f"Row {row} has norm <= 1e-12; direction is undefined.")


class DimensionMismatch(LabError, ValueError):
    pass


class ShapeMismatch(LabError, ValueError):
    pass


class WrongDimension(LabError, ValueError):
    pass


class InvalidDimension(LabError, ValueError):
    pass


class EmptyInput(LabError, ValueError):
    pass


class NonFiniteEvaluation(LabError, ArithmeticError):
    pass


class IndexOutOfRange(LabError, IndexError):
    pass


class LabelOutOfRange(LabError, IndexError):
    pass


class NonPositiveTemperature(LabError, ValueError):
    pass


class NotUnitNorm(LabError, ValueError):
    pass


class SingleClassUnsupported(LabError, ValueError):
    pass


class ModeMismatch(LabError, ValueError):
    pass


class KindMismatch(LabError, ValueError):
    pass


class CoincidentVectors(LabError, ValueError):
    pass


class StaleCache(LabError, RuntimeError):
    pass


class BadMagic(LabError, ValueError):
    pass


class CountMismatch(LabError, ValueError):
    pass


class TruncatedFile(LabError, ValueError):
    pass


class EmptySplit(LabError, ValueError):
    pass


class InsufficientSamples(LabError, ValueError):
    pass


class EmptyGallery(LabError, ValueError):
    pass


class KExceedsGallery(LabError, ValueError):
    pass


class ExportError(LabError, OSError):
    pass
