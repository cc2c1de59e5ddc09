"""Exception hierarchy shared across the package."""


class FedPRPError(Exception):
    """Base class for all package errors."""


class ConfigError(FedPRPError, ValueError):
    """Invalid configuration or incompatible dimensions."""


class InputError(FedPRPError, ValueError):
    """Invalid input data."""


class GenerationError(FedPRPError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class UpdateError(FedPRPError, RuntimeError):
    """A local update could not run (e.g. empty client data)."""


class ProtocolError(FedPRPError, RuntimeError):
    """Client reports are inconsistent with the server protocol."""


class RoundError(FedPRPError, RuntimeError):
    """A federation round produced no usable client reports."""


class ComparisonError(FedPRPError, ValueError):
    """Runs cannot be compared (mismatched partitions or seeds)."""


class LoadError(FedPRPError, ValueError):
    """A checkpoint or data file could not be read."""


class MissingPrototypeError(FedPRPError, LookupError):
    """A loss needed a prototype for a class that has none."""
