"""Exception types shared across the package.

Every error raised on purpose derives from StreamnavError so callers can
catch the package's failures without also swallowing programming mistakes.
"""

from __future__ import annotations


class StreamnavError(Exception):
    """Base class for all deliberate failures."""


class SingularQuery(StreamnavError):
    """Field sampled within the singular core of a point element."""


class DegeneratePanel(StreamnavError):
    """Panel length below the resolvable floor."""


class OverlappingPanels(StreamnavError):
    """Two panels of an assembled scene intersect each other."""


class SingularSystem(StreamnavError):
    """Boundary system is numerically singular or too ill-conditioned."""


class UnsolvedSurface(StreamnavError):
    """Surface queried for induced flow before its strengths were solved."""


class KuttaOnSurface(StreamnavError):
    """Trailing-edge closure point lies on one of the panels."""


class DegenerateSurface(StreamnavError):
    """Too few distinct scan points to build a surface."""


class RobotAtCentroid(StreamnavError):
    """Vehicle coincides with the cluster centroid; shift direction undefined."""


class IllConditionedInnovation(StreamnavError):
    """Innovation covariance cannot be inverted reliably."""


class ZeroSeparation(StreamnavError):
    """Vehicle and obstacle centers coincide; barrier terms undefined."""


class DimensionMismatch(StreamnavError):
    """Operands disagree on dimensionality."""


class ConfigError(StreamnavError):
    """Scenario configuration rejected. Exit code 2 when raised from the CLI."""


class IoError(StreamnavError):
    """Filesystem failure while reading or writing artifacts. Exit code 3."""
