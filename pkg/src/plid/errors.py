"""Exception types shared across the package."""


class PlidError(Exception):
    """Base class for all package-specific errors."""


class LoadError(PlidError):
    """A required file is missing or unreadable."""


class ValidationError(PlidError, ValueError):
    """Loaded or supplied data violates a documented invariant."""


class ConfigError(PlidError, ValueError):
    """Bad configuration value or unknown configuration key."""


class TrainingError(PlidError, RuntimeError):
    """Training aborted, e.g. because a loss term became non-finite."""
