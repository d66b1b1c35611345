"""Exception types shared across the toolkit."""


class FUSegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FUSegError, ValueError):
    """Invalid configuration value, unknown key or mismatched block parameters."""


class ShapeError(FUSegError, ValueError):
    """Tensor or mask shapes that violate an operation's contract."""


class DatasetError(FUSegError):
    """A dataset file is missing, unreadable or inconsistent."""


class TrainingError(FUSegError, RuntimeError):
    """Training cannot continue (empty split, non-finite loss)."""
