"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class AuditError(Exception):
    exit_code = 1


class ConfigError(AuditError):
    exit_code = 2


class DataError(AuditError):
    exit_code = 3


class NumericalError(AuditError):
    exit_code = 4


class DegenerateFitWarning(UserWarning):
    """A fit fell back to a simpler estimator because the problem was ill-posed."""


class ParseWarning(UserWarning):
    """Input cells could not be parsed and were marked missing."""
