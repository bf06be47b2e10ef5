"""
Error types for the Sketch/Patch codec
Every byte-level parse error carries the offset where parsing stopped
"""


class SketchPatchError(Exception):
    """Base class for all codec errors"""


class FormatError(SketchPatchError):
    """
    Malformed input bytes

    Args:
        message: Human readable description
        offset: Byte offset where the problem was detected (None if unknown)
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class PlyFormatError(FormatError):
    """Malformed header, missing property or truncated payload in a PLY file"""


class CameraFileError(FormatError):
    """Camera record with a missing or malformed field"""


class LineFileError(FormatError):
    """Unparseable line-segment text file"""

    def __init__(self, message, line_number):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class ContainerError(FormatError):
    """Base class for SKPH container errors"""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class TruncatedSectionError(ContainerError):
    def __init__(self, section, offset):
        self.section = section
        super().__init__(f"truncated section '{section}'", offset)


class CorruptBlockError(ContainerError):
    pass


class GeometryError(SketchPatchError):
    """Zero-norm quaternion, zero-length segment or singular covariance"""


class CodecError(SketchPatchError):
    """Invalid input to a fitting or encoding step"""


class ImageMismatchError(SketchPatchError):
    """Two images with different dimensions were compared"""


class PipelineStageError(SketchPatchError):
    """
    Failure inside one stage of the encode pipeline

    Args:
        stage: Stage name (partition, sketch_encode, ...)
        cause: The original exception
    """

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
