"""Exception hierarchy.

Two families matter to callers: :class:`ConfigError` (user mistakes, CLI
exit code 2) and :class:`PhysicsError` (a solver or audit could not do its
job, CLI exit code 1).
"""


class MesicError(Exception):
    pass


class ConfigError(MesicError):
    """Malformed, unknown or physically inadmissible configuration."""


class PhysicsError(MesicError):
    pass


class SingularMapError(PhysicsError):
    pass


class NormalizationError(ConfigError):
    pass


class CFLError(ConfigError):
    """Time step violates the leapfrog stability bound."""


class DomainError(PhysicsError):
    pass


class GaugeError(PhysicsError):
    """Null or spacelike worldline velocity, or a broken gauge constraint."""


class EscapeError(PhysicsError):
    """The particle (or its kernel support) left a non-periodic grid."""


class BoundaryError(PhysicsError):
    pass


class DivergenceError(PhysicsError):
    """Non-finite values appeared during time stepping."""


class ConvergenceError(PhysicsError):
    pass


class AlignmentError(PhysicsError):
    """Field and particle histories do not share a time window."""


class WindowError(PhysicsError):
    pass


class NodeIndexError(PhysicsError, IndexError):
    """Variation requested at a node that the variational problem keeps fixed."""


class AuditError(PhysicsError):
    pass


class StabilityError(PhysicsError):
    """A solver step was requested with a time step beyond its stability bound."""
