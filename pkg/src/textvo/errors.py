"""Exception hierarchy shared across the library."""


class TextVOError(Exception):
    """Base class for all library errors."""


class BehindCamera(TextVOError):
    """A point has non-positive (or too small) depth in the relevant camera."""


class DegenerateConfiguration(TextVOError):
    """A linear system is rank deficient (collinear points etc.)."""


class InsufficientParallax(TextVOError):
    """Baseline / parallax too small to solve for structure."""


class OutOfBounds(TextVOError):
    """Sample position outside the image domain."""


class TooSmall(TextVOError):
    """Image too small for the requested pyramid depth."""


class FlatPatch(TextVOError):
    """Patch standard deviation below the configured floor."""


class LengthMismatch(TextVOError):
    """Two patches being compared have different pixel counts."""


class TooFewValid(TextVOError):
    """Less than half of the reference pixels project into the target image."""


class RegionTooSmall(TextVOError):
    """Quad area below the minimum usable size."""


class UnknownReference(TextVOError):
    """A map mutation referenced an id that does not exist."""


class Diverged(TextVOError):
    """An optimization failed to decrease the cost."""


class TrackingLost(TextVOError):
    """Frame tracking failed (too few inliers or diverging cost)."""


class SolverFailure(TextVOError):
    """Normal equations singular beyond damping recovery."""


class BootstrapFailed(TextVOError):
    """Two-view initialization failed (parallax or inlier count)."""


class InsufficientData(TextVOError):
    """Not enough training samples for calibration."""


class TooFewMatches(TextVOError):
    """Not enough timestamp-matched pose pairs for alignment."""


class ZeroVector(TextVOError):
    """A direction vector has zero norm."""


class IoFailure(TextVOError):
    """File input/output failed."""


class ConfigError(TextVOError):
    """Invalid or unknown configuration key/value."""
