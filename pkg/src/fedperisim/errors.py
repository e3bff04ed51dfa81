"""Exception hierarchy shared across the package."""


class FedperisimError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(FedperisimError):
    exit_code = 2


class StageOrderError(FedperisimError):
    """A pipeline stage ran before its upstream artifacts existed."""

    exit_code = 3


class StaleCacheError(StageOrderError):
    """Persisted artifacts were produced under a different config hash."""


class DivergenceError(FedperisimError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 4

    def __init__(self, message, round_index=None, site=None):
        super().__init__(message)
        self.round_index = round_index
        self.site = site


class DimensionError(FedperisimError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(FedperisimError):
    """An API precondition was violated by the caller."""


class OutOfVocabularyError(FedperisimError):
    """Embedding index outside the table."""


class NotFittedError(FedperisimError):
    """Estimator used before fit()."""


class FitError(FedperisimError):
    """A transform could not be fitted (e.g. a feature with no observed values)."""


class SplitError(FedperisimError):
    """Cohort too small to split chronologically."""


class UndefinedMetricError(FedperisimError):
    """Metric undefined for the given labels (single class, no positives)."""


class InstabilityError(FedperisimError):
    """Too many degenerate bootstrap resamples."""


class CalibrationError(FedperisimError):
    """Intercept bisection failed to converge."""


class ClientDataError(FedperisimError):
    """A federated client has no local training data."""


class ProtocolError(FedperisimError):
    """Malformed federated update (e.g. parameter-length mismatch)."""


class StatTestError(FedperisimError):
    """Degenerate contingency table or group structure."""
