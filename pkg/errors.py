"""Exception hierarchy for the radar odometry pipeline.

Every error carries the process exit code the CLI should report for it:
2 for usage or data problems, 3 for numerical failures.
"""


class RadarOdometryError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class DataError(RadarOdometryError, ValueError):
    """Invalid input data, arguments or files."""

    exit_code = 2


class NumericalError(RadarOdometryError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""

    exit_code = 3


# Lie group
class AngleNearPi(NumericalError):
    """Rotation angle too close to pi for the principal-branch logarithm."""


# Point clouds
class InvalidPointCloud(DataError):
    pass


class CountTooLarge(DataError):
    pass


class KTooLarge(DataError):
    pass


class EmptyAfterFilter(DataError):
    pass


# Autodiff
class ShapeMismatch(DataError):
    pass


class NotScalar(DataError):
    pass


class ArityMismatch(DataError):
    pass


# Optimization
class AllFramesFixed(DataError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


# Tracker
class WrongLength(DataError):
    pass


class EmptyHistory(DataError):
    pass


class InsufficientFrames(DataError):
    pass


class NonFiniteLoss(NumericalError):
    pass


# Evaluation
class LengthMismatch(DataError):
    pass


class TrajectoryTooShort(DataError):
    pass


class IoFailure(DataError):
    pass


# Baselines
class Degenerate(NumericalError):
    """Fewer than three non-collinear correspondences."""


# Configuration and checkpoints
class ConfigError(DataError):
    pass


class CheckpointError(DataError):
    pass


# Verification
class GradcheckFailed(NumericalError):
    """Analytic derivatives disagree with finite differences."""
