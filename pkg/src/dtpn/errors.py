"""Exception hierarchy shared across the package.

ValidationError covers everything a well-formed run should never hit
(bad files, bad configs, mismatched shapes at module boundaries) and maps
to exit code 1 in the CLI.  NumericalError covers runtime numerical
failures (training divergence, failed gradient checks) and maps to exit
code 2.
"""


class DtpnError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DtpnError):
    """Malformed or inconsistent input: files, configs, shapes."""


class FormatError(ValidationError):
    """A serialized artifact does not match its declared format."""


class ConfigError(ValidationError):
    """Configuration values are inconsistent or do not match an artifact."""


class NumericalError(DtpnError):
    """A numerical computation failed (divergence, gradient check)."""
