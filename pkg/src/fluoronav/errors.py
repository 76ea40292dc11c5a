"""Exception types raised across the package.

Every error derives from :class:`FluoroNavError` so callers (the CLI in
particular) can map families of failures onto exit codes.
"""


class FluoroNavError(Exception):
    """Base class for all package errors."""


# geometry
class DepthNonPositive(FluoroNavError):
    """A point lies at or behind the X-ray source plane."""


class IntrinsicsMismatch(FluoroNavError):
    """A projection matrix is inconsistent with the supplied intrinsics."""


# imaging / file formats
class ParseError(FluoroNavError):
    """A text header or data file is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SizeMismatch(FluoroNavError):
    """A binary payload does not match the size declared in its header."""


class EmptyOutput(FluoroNavError):
    """An operation would produce an image with a zero-length axis."""


class DimensionMismatch(FluoroNavError):
    """Two images that must share a shape do not."""


# estimation
class InsufficientPoints(FluoroNavError):
    pass


class DegenerateConfiguration(FluoroNavError):
    """Point configuration is collinear, coplanar or otherwise rank deficient."""


class NoConvergence(FluoroNavError):
    pass


class MatchFailed(FluoroNavError):
    """2D/3D fiducial correspondence could not be established."""


# optimisation / registration
class InvalidConfig(FluoroNavError):
    pass


class RenderFailure(FluoroNavError):
    pass


class ModeInputMissing(FluoroNavError):
    """A registration mode was requested without the inputs it needs."""


# navigation / metrics / phantom
class DegenerateDirection(FluoroNavError):
    pass


class EmptyInput(FluoroNavError):
    pass


class PlacementFailure(FluoroNavError):
    """Rejection sampling could not place phantom structures."""


class DegeneracyWarning(UserWarning):
    """Pose estimate from a (near) coplanar fiducial set may be ambiguous."""
