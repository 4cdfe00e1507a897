"""Exception types shared across the package."""


class ResinvError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(ResinvError):
    """Invalid configuration, well layout, or input file."""


class OutsideDomainError(ConfigError):
    """A point (e.g. a well location) falls outside the reservoir domain."""


class NumericalError(ResinvError):
    """A numerical operation failed (singular system, CFL violation,
    non-finite state, exhausted parameter search)."""
