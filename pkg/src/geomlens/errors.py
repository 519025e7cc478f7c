"""Exception hierarchy. Every module error derives from GeomlensError."""


class GeomlensError(Exception):
    """Base class for all errors raised by geomlens."""


class InvalidDistribution(GeomlensError):
    pass


class DegenerateDirection(GeomlensError):
    pass


class EpsilonTooLarge(GeomlensError):
    pass


class InadmissibleAction(GeomlensError):
    pass


class NonConvergence(GeomlensError):
    pass


class OutOfImage(GeomlensError):
    pass


class SingularGram(GeomlensError):
    pass


class RankTooLarge(GeomlensError):
    pass


class NoGap(GeomlensError):
    pass


class Divergence(GeomlensError):
    """Training risk blew up."""


class ConfigError(GeomlensError):
    pass


class InvariantViolation(GeomlensError):
    """A structural identity of a built object failed its tolerance."""
