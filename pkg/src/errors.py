"""
Error taxonomy for the fabrication toolchain.

Every failure a user can trigger is a FabError subclass whose ``code`` is
the name reported on standard error and in run reports.
"""

from typing import Any, Dict, Optional


class FabError(Exception):
    """Root of all toolchain errors."""

    code = "FabError"

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"code": self.code, "message": self.message}
        if self.details:
            payload["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return payload


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    try:
        return [float(v) for v in value]
    except TypeError:
        return str(value)


# mesh_core
class TruncatedFile(FabError):
    code = "TruncatedFile"


class MalformedRecord(FabError):
    code = "MalformedRecord"

    def __init__(self, message: str = "", offset: Optional[int] = None, **details: Any):
        super().__init__(message, offset=offset, **details)
        self.offset = offset


class UnsupportedFeature(FabError):
    code = "UnsupportedFeature"


class IndexOutOfRange(FabError):
    code = "IndexOutOfRange"


class InvalidTransform(FabError):
    code = "InvalidTransform"


# voxel_csg
class NotWatertight(FabError):
    code = "NotWatertight"


class GridTooLarge(FabError):
    code = "GridTooLarge"


class PitchMismatch(FabError):
    code = "PitchMismatch"


class DeltaExceedsPadding(FabError):
    code = "DeltaExceedsPadding"


# blank_gen
class SpecInvalid(FabError):
    code = "SpecInvalid"

    def __init__(self, message: str = "", field: Optional[str] = None, **details: Any):
        super().__init__(message, field=field, **details)
        self.field = field


# registration
class DegenerateInput(FabError):
    code = "DegenerateInput"


class AmbiguousCorrespondence(FabError):
    code = "AmbiguousCorrespondence"


class HighResidual(FabError):
    code = "HighResidual"


class DetectionFailed(FabError):
    code = "DetectionFailed"


# assembly
class PlaneMiss(FabError):
    code = "PlaneMiss"


class ThinFeature(FabError):
    code = "ThinFeature"


class WindowOffPiece(FabError):
    code = "WindowOffPiece"


class BracketOutsideCavity(FabError):
    code = "BracketOutsideCavity"


class BossOffWall(FabError):
    code = "BossOffWall"


class PreconditionFailed(FabError):
    code = "PreconditionFailed"


# gesture
class InsufficientData(FabError):
    code = "InsufficientData"


class NonFiniteLoss(FabError):
    code = "NonFiniteLoss"

    def __init__(self, message: str = "", epoch: Optional[int] = None, **details: Any):
        super().__init__(message, epoch=epoch, **details)
        self.epoch = epoch


class ZeroLengthPath(FabError):
    code = "ZeroLengthPath"


class DimensionMismatch(FabError):
    code = "DimensionMismatch"


class DeviceMismatch(FabError):
    code = "DeviceMismatch"


class StageError(FabError):
    """First failing pipeline stage, wrapping the original error."""

    code = "StageError"

    def __init__(self, stage: str, error: FabError):
        super().__init__(f"{stage}: {error.code}: {error.message}", stage=stage)
        self.stage = stage
        self.error = error
        self.code = error.code


def spec_invalid_from(error) -> SpecInvalid:
    """Convert a pydantic ValidationError into SpecInvalid naming the first bad field."""
    first = error.errors()[0]
    loc = ".".join(str(p) for p in first["loc"]) or "spec"
    return SpecInvalid(f"{loc}: {first['msg']}", field=loc)
