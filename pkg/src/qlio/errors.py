"""Exception types raised by the odometry engine."""


class OdometryError(Exception):
    """Base class for all engine errors."""


class DegenerateGravityError(OdometryError, ValueError):
    """Gravity direction sits on the singular point of the S2 chart."""


class NotStationaryError(OdometryError):
    """Static initialization saw motion in the IMU window."""


class InsufficientDataError(OdometryError):
    """Not enough samples to perform the requested operation."""


class InvariantViolationError(OdometryError):
    """An internal processing invariant was broken (e.g. double correction)."""


class DatasetFormatError(OdometryError, ValueError):
    """A dataset or config record could not be parsed."""


class OrderingError(OdometryError, ValueError):
    """Timestamps are not monotone where the format requires it."""


class GenerationError(OdometryError):
    """The synthetic generator could not produce data for the requested scene."""


class AssociationError(OdometryError):
    """Too few pose pairs could be associated for trajectory evaluation."""
