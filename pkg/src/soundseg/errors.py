"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class GenerationError(RuntimeError):
    """Synthetic data could not be generated (e.g. object out of bounds)."""


class NumericError(RuntimeError):
    """A numeric invariant was violated (NaN loss, NaN attention scores)."""


class RetriableClientError(RuntimeError):
    """Transport-level failure talking to a text-completion endpoint."""
