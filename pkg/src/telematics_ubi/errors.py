"""Exception hierarchy shared by all pipeline stages."""

from __future__ import annotations


class TelematicsError(Exception):
    """Base class for every error raised by this package."""


class DataError(TelematicsError):
    """Input data is unusable at some pipeline stage."""

    def __init__(self, message: str, *, stage: str | None = None, location: str | None = None):
        self.stage = stage
        self.location = location
        prefix = f"[{stage}] " if stage else ""
        suffix = f" ({location})" if location else ""
        super().__init__(f"{prefix}{message}{suffix}")


class ConfigError(TelematicsError):
    """Pipeline configuration is invalid."""


# ingest
class EmptyRecordSet(DataError):
    pass


class PolicyRejected(DataError):
    def __init__(self, message: str, *, reason: str, policy_id=None):
        self.reason = reason
        self.policy_id = policy_id
        super().__init__(message, stage="ingest")


class NoTripsInCoverage(PolicyRejected):
    pass


# features
class NegativeSpeed(ValueError, TelematicsError):
    pass


class WidthOutOfRange(ValueError, TelematicsError):
    pass


class ZeroTotalTime(ValueError, TelematicsError):
    pass


class EmptyTripSet(ValueError, TelematicsError):
    pass


class DegenerateData(ValueError, TelematicsError):
    pass


class KTooLarge(ValueError, TelematicsError):
    pass


# regress
class MissingColumn(KeyError, TelematicsError):
    pass


class NonPositiveExposure(ValueError, TelematicsError):
    pass


class UnknownLevel(ValueError, TelematicsError):
    pass


class RankDeficient(ValueError, TelematicsError):
    pass


class NonPositiveMu(ValueError, TelematicsError):
    pass


class UnknownCoefficient(KeyError, TelematicsError):
    pass


# evaluate
class EmptyInput(ValueError, TelematicsError):
    pass


class DegenerateSd(ValueError, TelematicsError):
    pass


class DegenerateSample(ValueError, TelematicsError):
    pass


# learning
class InsufficientData(ValueError, TelematicsError):
    pass


class ZeroTimeEvent(ValueError, TelematicsError):
    pass


# simulate
class ConfigInvalid(ValueError, TelematicsError):
    pass
