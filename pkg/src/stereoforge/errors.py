"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, InsufficientDataError
-> 4, any other StereoForgeError -> 3.
"""


class StereoForgeError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(StereoForgeError):
    """Bad configuration file or command-line parameters."""


class ParseError(StereoForgeError):
    """Malformed metadata sidecar or data file."""


class FormatError(ParseError):
    """Structurally broken raster / cloud / disparity file."""


class DomainError(StereoForgeError, ValueError):
    """Argument outside an operation's mathematical domain."""


class BoundsError(DomainError):
    """Image or grid coordinate outside the valid range."""


class ExtentError(DomainError):
    """Geometric extents do not overlap or lattices are incompatible."""


class GeometryError(StereoForgeError):
    """Degenerate viewing geometry (parallel rays, singular normal equations, ...)."""


class ProjectionError(GeometryError):
    """No image line observes the requested ground point."""


class ConvergenceError(GeometryError):
    """Iterative geometric solve failed to converge."""


class InsufficientDataError(StereoForgeError):
    """Too few tie points / correspondences / features to proceed."""
