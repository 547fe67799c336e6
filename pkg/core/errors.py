"""
Exception hierarchy for the PMP toolkit.

Library code raises these; only the CLI layer turns them into exit codes.
"""


class PMPError(Exception):
    exit_code = 1


class StateError(PMPError):
    """Engine used out of order (backward twice, step after convergence, ...)."""
    exit_code = 1


class DimensionError(PMPError):
    exit_code = 1


class ArgumentError(PMPError):
    exit_code = 2


class ConfigError(PMPError):
    exit_code = 2


class UsageError(PMPError):
    exit_code = 2


class DataError(PMPError):
    exit_code = 3


class CompatibilityError(PMPError):
    """Artifacts that do not belong together (layout hash mismatch)."""
    exit_code = 3


class FormatError(PMPError):
    exit_code = 3


class TrainingError(PMPError):
    exit_code = 3


class NumericError(PMPError):
    exit_code = 4


class AnalysisError(PMPError):
    exit_code = 4


class ModelError(ConfigError):
    """Analytic model that violates its own assumptions."""
