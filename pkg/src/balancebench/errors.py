"""Exception types shared across the package."""


class BalanceBenchError(Exception):
    """Base class for package-specific failures."""


class ConfigError(BalanceBenchError):
    """Invalid configuration: unknown labels, bad flag combinations, malformed files."""


class GenerationError(BalanceBenchError):
    """Dataset generation could not produce a usable sample."""


class NumericError(BalanceBenchError):
    """A numeric routine failed beyond its built-in fallbacks."""


class EstimationError(BalanceBenchError):
    """An estimator could not be evaluated (e.g. a group was trimmed away entirely)."""
