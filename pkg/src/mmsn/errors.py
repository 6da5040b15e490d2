"""Exception types raised across the package.

Every error carries a stable ``code`` attribute so the command line can print
a machine-parsable failure line.
"""

from __future__ import annotations


class MMSNError(Exception):
    code = "MMSN_ERROR"


# data / manifests
class MissingColumn(MMSNError, ValueError):
    code = "MissingColumn"


class InvalidEnumValue(MMSNError, ValueError):
    code = "InvalidEnumValue"

    def __init__(self, row: int, field: str, value: object):
        super().__init__(f"row {row}: invalid value {value!r} for field {field!r}")
        self.row = row
        self.field = field
        self.value = value


class AgeOutOfRange(MMSNError, ValueError):
    code = "AgeOutOfRange"

    def __init__(self, age: object, row: int | None = None):
        where = f"row {row}: " if row is not None else ""
        super().__init__(f"{where}age {age!r} outside [18, 100]")
        self.row = row
        self.age = age


class DuplicateSampleId(MMSNError, ValueError):
    code = "DuplicateSampleId"


class TooFewPatients(MMSNError, ValueError):
    code = "TooFewPatients"


class InvalidSize(MMSNError, ValueError):
    code = "InvalidSize"


class EmptyResult(MMSNError, ValueError):
    code = "EmptyResult"


# features
class UnknownValue(MMSNError, ValueError):
    code = "UnknownValue"


class UnknownFeatureGroup(MMSNError, ValueError):
    code = "UnknownFeatureGroup"


# views
class ImageTooSmall(MMSNError, ValueError):
    code = "ImageTooSmall"


class NonDivisibleSize(MMSNError, ValueError):
    code = "NonDivisibleSize"


# models / loss
class ShapeMismatch(MMSNError, ValueError):
    code = "ShapeMismatch"


class ZeroVector(MMSNError, ValueError):
    code = "ZeroVector"


class NonPositiveTemperature(MMSNError, ValueError):
    code = "NonPositiveTemperature"


class InvalidDistribution(MMSNError, ValueError):
    code = "InvalidDistribution"


class EmptyBatch(MMSNError, ValueError):
    code = "EmptyBatch"


class NonFiniteLoss(MMSNError, FloatingPointError):
    code = "NonFiniteLoss"

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointMismatch(MMSNError, ValueError):
    code = "CheckpointMismatch"


# evaluation
class SingleClass(MMSNError, ValueError):
    code = "SingleClass"


class NoPositives(MMSNError, ValueError):
    code = "NoPositives"


class TooFewValidResamples(MMSNError, ValueError):
    code = "TooFewValidResamples"


class MisalignedInputs(MMSNError, ValueError):
    code = "MisalignedInputs"


class TooFewSamples(MMSNError, ValueError):
    code = "TooFewSamples"


class ConfigError(MMSNError, ValueError):
    code = "ConfigError"
