"""
Error types shared by every module.

Each error carries a stable ``code`` (its class name) which the CLI prints on
the error stream, so callers can branch on it without parsing messages.
"""


class QDMError(Exception):
    """Base class for all domain errors"""

    @property
    def code(self) -> str:
        return type(self).__name__


class InvalidArgumentError(QDMError):
    pass


class InvalidMapError(QDMError):
    pass


class GridMismatchError(QDMError):
    pass


class QFMFormatError(QDMError):
    pass


class SweepRangeError(QDMError):
    pass


class NoDipsFound(QDMError):
    pass


class DegenerateResonances(QDMError):
    pass


class NoConvergence(QDMError):
    pass


class SingularFrameError(QDMError):
    pass


class BiasMarginError(QDMError):
    pass


class SourceOnGridError(QDMError):
    pass


class OutOfPlaneError(QDMError):
    pass


class CutoffError(QDMError):
    pass


class StandoffError(QDMError):
    pass


class NotWireLikeError(QDMError):
    pass


class InsufficientSamplesError(QDMError):
    pass


class LockInWindowError(QDMError):
    pass


class InvalidSeedError(QDMError):
    pass
