"""Exception hierarchy shared by the library and the command line."""


class AWCLError(Exception):
    """Base class for all package errors."""


class TaxonomyError(AWCLError, KeyError):
    """Unknown label name/id or an inconsistent taxonomy."""

    def __str__(self):
        # KeyError quotes its argument; keep messages readable.
        return str(self.args[0]) if self.args else ""


class ManifestError(AWCLError, ValueError):
    """Manifest (or taxonomy file) could not be parsed."""


class ConfigError(AWCLError, ValueError):
    """Invalid configuration value; message names the offending field."""


class NumericalDomainError(AWCLError, ArithmeticError):
    """Input outside the domain of a numerical routine (e.g. zero-norm vector)."""


class TrainingDivergedError(AWCLError, RuntimeError):
    """Loss became non-finite during optimisation."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
