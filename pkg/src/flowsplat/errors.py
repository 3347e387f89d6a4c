"""Exception hierarchy.

Every error raised on bad input data derives from :class:`DataError` so the
command line can map it onto its data-error exit code.
"""


class FlowSplatError(Exception):
    pass


class DataError(FlowSplatError):
    pass


class BehindCamera(DataError):
    pass


class InvalidDepth(DataError):
    pass


class InsufficientData(DataError):
    pass


class SingularSystem(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class BadHeader(DataError):
    pass


class MissingIndexFile(DataError):
    pass


class NoAssociations(DataError):
    pass


class DegenerateScene(DataError):
    pass


class NonContiguousKeyframe(FlowSplatError):
    pass


class LengthMismatch(DataError):
    pass


class ConfigError(FlowSplatError):
    pass


class EmptyValidSet(FlowSplatError):
    pass
