"""Exception hierarchy for the rwre package."""


class RWREError(Exception):
    """Base class for all package errors."""


class ModelInvalid(RWREError, ValueError):
    pass


class OverlayInvalid(RWREError, ValueError):
    pass


class StartOutside(RWREError, ValueError):
    pass


class BadParameter(RWREError, ValueError):
    pass


class InsufficientData(RWREError):
    pass


class NoConvergence(RWREError):
    pass


class RegionTooLarge(RWREError):
    pass


class DegenerateRho(RWREError):
    pass


class NoRightExit(RWREError):
    pass


class SpecInvalid(RWREError, ValueError):
    pass


class DegenerateLadder(RWREError, ValueError):
    pass


class ReferenceMismatch(RWREError, ValueError):
    pass


class NoDrift(RWREError):
    pass


class SupportTooLarge(RWREError):
    pass


class DegenerateLaw(RWREError, ValueError):
    pass


class ConfigError(RWREError, ValueError):
    """Raised for invalid experiment configurations (CLI exit code 2)."""
