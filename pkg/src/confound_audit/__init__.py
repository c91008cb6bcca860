"""Audit whether a classifier's apparent skill comes from direct signal or confounders."""

from confound_audit.errors import AuditError, ConfigError, DataError, NumericalError

__version__ = "0.1.0"

__all__ = ["AuditError", "ConfigError", "DataError", "NumericalError", "__version__"]
