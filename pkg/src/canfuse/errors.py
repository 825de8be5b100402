"""Exception hierarchy shared across the pipeline.

Every error carries a stable ``code`` so the CLI can emit a machine-readable
failure record.
"""

from __future__ import annotations


class CanFuseError(Exception):
    code = "error"

    def __init__(self, message: str = "", **context):
        super().__init__(message or self.code)
        self.context = context

    def to_dict(self) -> dict:
        out = {"error": self.code, "message": str(self)}
        out.update({k: v for k, v in self.context.items() if v is not None})
        return out


# parsing / file formats
class MissingHeader(CanFuseError):
    code = "MissingHeader"


class MalformedLine(CanFuseError):
    code = "MalformedLine"

    def __init__(self, line_no: int, message: str = ""):
        super().__init__(message or f"malformed line {line_no}", line_no=line_no)
        self.line_no = line_no


class NonFiniteValue(CanFuseError):
    code = "NonFiniteValue"

    def __init__(self, line_no: int, message: str = ""):
        super().__init__(message or f"non-finite value on line {line_no}", line_no=line_no)
        self.line_no = line_no


class UnsupportedFormat(CanFuseError):
    code = "UnsupportedFormat"


class TruncatedFile(CanFuseError):
    code = "TruncatedFile"


class BadMaxval(CanFuseError):
    code = "BadMaxval"


class BadMagic(CanFuseError):
    code = "BadMagic"


class VersionMismatch(CanFuseError):
    code = "VersionMismatch"


# sequence / signal contracts
class EmptyInput(CanFuseError):
    code = "EmptyInput"


class EmptySeries(CanFuseError):
    code = "EmptySeries"

    def __init__(self, name: str):
        super().__init__(f"series {name!r} is empty", signal=name)
        self.name = name


class NoInitialValue(CanFuseError):
    code = "NoInitialValue"

    def __init__(self, name: str):
        super().__init__(f"series {name!r} has no update at or before t_start", signal=name)
        self.name = name


class NonMonotonicSeries(CanFuseError):
    code = "NonMonotonicSeries"

    def __init__(self, name: str):
        super().__init__(f"series {name!r} has out-of-order timestamps", signal=name)
        self.name = name


class NonMonotonicFrameIndex(CanFuseError):
    code = "NonMonotonicFrameIndex"

    def __init__(self, segment_id: int):
        super().__init__(f"frame_index not strictly increasing in segment {segment_id}",
                         segment_id=segment_id)
        self.segment_id = segment_id


class NonConsecutiveSegments(CanFuseError):
    code = "NonConsecutiveSegments"


class EmptySegment(CanFuseError):
    code = "EmptySegment"


class ZeroDimension(CanFuseError):
    code = "ZeroDimension"


class ZeroFactor(CanFuseError):
    code = "ZeroFactor"


class NoLandmark(CanFuseError):
    code = "NoLandmark"


class TooFewFrames(CanFuseError):
    code = "TooFewFrames"


class EmptyFrames(CanFuseError):
    code = "EmptyFrames"


class EmptyRows(CanFuseError):
    code = "EmptyRows"


class UnknownGroup(CanFuseError):
    code = "UnknownGroup"


class EmptySplit(CanFuseError):
    code = "EmptySplit"


class BadGroupCount(CanFuseError):
    code = "BadGroupCount"


# numerics / models
class ShapeMismatch(CanFuseError):
    code = "ShapeMismatch"


class KernelLargerThanInput(CanFuseError):
    code = "KernelLargerThanInput"


class ConfigMismatch(CanFuseError):
    code = "ConfigMismatch"


class MissingCanFeatures(CanFuseError):
    code = "MissingCanFeatures"


class UnexpectedCanFeatures(CanFuseError):
    code = "UnexpectedCanFeatures"


class GeometryMismatch(CanFuseError):
    code = "GeometryMismatch"


class VariantMismatch(CanFuseError):
    code = "VariantMismatch"


class DivergedLoss(CanFuseError):
    code = "DivergedLoss"


class InvalidConfig(CanFuseError):
    code = "InvalidConfig"


class UnknownSubcommand(CanFuseError):
    code = "UnknownSubcommand"
