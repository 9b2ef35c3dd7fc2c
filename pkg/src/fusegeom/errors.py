"""Exception types shared across the package."""


class FusegeomError(Exception):
    """Base class for all errors raised by fusegeom."""


class MissingRecord(FusegeomError):
    pass


class MalformedNumber(FusegeomError):
    pass


class MalformedLine(FusegeomError):
    pass


class FrameMismatch(FusegeomError):
    pass


class NonPositiveDepth(FusegeomError):
    pass


class FullyBehindCamera(FusegeomError):
    pass


class LengthMismatch(FusegeomError):
    pass


class KindMismatch(FusegeomError):
    pass


class BothEmpty(FusegeomError):
    pass


class EmptyInput(FusegeomError):
    pass


class MissingBaseline(FusegeomError):
    pass


class TooFewPoints(FusegeomError):
    pass


class EmptyCloud(FusegeomError):
    pass


class TruncatedFile(FusegeomError):
    pass


class InfeasiblePlacement(FusegeomError):
    pass


class OutOfView(FullyBehindCamera):
    """Box is in front of the camera but its projection misses the image."""


class MalformedFile(FusegeomError):
    pass
