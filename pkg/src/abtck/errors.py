"""Exception types shared across the package."""

import numpy as np


class DomainError(ValueError):
    """Input points or bounds fall outside the rectangular domain."""


class ConfigError(ValueError):
    """Invalid configuration or an unusable combination of settings."""


class NumericalSingularityError(np.linalg.LinAlgError):
    """A covariance system stayed singular after jitter escalation."""
