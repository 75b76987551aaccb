"""Exception types shared across the package."""


class PopfusionError(Exception):
    """Base class for package errors."""


class ValidationError(PopfusionError):
    """Bad inputs, configs, or contract violations (CLI exit code 1)."""


class TrainingError(PopfusionError):
    """Runtime failures during optimization, e.g. non-finite losses (exit 2)."""
