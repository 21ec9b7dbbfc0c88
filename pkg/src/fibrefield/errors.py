"""Error types raised by the library.

Every failure mode that callers are expected to handle gets its own class so
tests and the CLI can distinguish bad input (usage errors, exit code 2) from
internal inconsistencies (exit code 3).
"""


class FibreFieldError(Exception):
    """Base class for all library errors."""


class DataError(FibreFieldError):
    """Malformed input data or configuration (a usage error)."""


class ConfigError(DataError):
    """Bad configuration file (unknown key, bad value, missing requirement)."""


class EmptyPattern(DataError):
    """A point pattern with too few points for the requested operation."""


class OutsideWindow(DataError):
    """A query location falls outside the observation window."""


class NonPositiveDefinite(FibreFieldError):
    """Matrix logarithm requested for a tensor that is not positive definite."""


class DegenerateWeights(FibreFieldError):
    """All weights of a weighted tensor mean vanish."""


class SingularStart(FibreFieldError):
    """Fibre tracing started on a singular (isotropic) grid cell."""


class SingularField(FibreFieldError):
    """No usable orientation anywhere a draw was attempted."""


class InvalidAllocation(FibreFieldError):
    """An allocation violates its own invariants (anchor off its fibre, ...)."""


class ZeroFibreLikelihood(FibreFieldError):
    """A signal point is allocated while the fibre set cannot carry one."""


class TooShort(FibreFieldError):
    """A sample sequence is too short for the requested diagnostic."""


class ZeroVariance(FibreFieldError):
    """A diagnostic needed a positive variance and the data had none."""


class DegenerateGeometry(UserWarning):
    """Warning: a geometric formula left its domain and a fallback was used."""
