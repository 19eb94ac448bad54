"""Exception hierarchy.

Every error a caller can recover from derives from :class:`VigsError`; the CLI
maps those to exit status 1.
"""


class VigsError(Exception):
    """Base class for recoverable data/processing errors."""


class InvalidArgumentError(VigsError, ValueError):
    pass


class OrderingError(VigsError, ValueError):
    """Timestamps are not strictly increasing."""


class GapError(VigsError, ValueError):
    """Two consecutive IMU samples are too far apart (dropped data)."""


class CoverageError(VigsError, ValueError):
    """An IMU stream does not cover the requested time interval."""


class InsufficientPointsError(VigsError, ValueError):
    pass


class EmptyTargetError(VigsError, ValueError):
    pass


class EmptyFrameError(VigsError, ValueError):
    pass


class DegenerateGeometryError(VigsError, RuntimeError):
    """Too few correspondences to constrain a 6-DoF pose."""


class MissingColorError(VigsError, ValueError):
    pass


class MissingAssetError(VigsError, FileNotFoundError):
    def __init__(self, missing):
        self.missing = [str(m) for m in missing]
        super().__init__("missing asset(s): " + ", ".join(self.missing))


class InsufficientOverlapError(VigsError, ValueError):
    pass


class InvalidSpecError(VigsError, ValueError):
    pass
