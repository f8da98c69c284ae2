"""Exception types shared across the simulator."""


class NanopipeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(NanopipeError):
    """Invalid static configuration: unknown ids, bad pool sizes, broken scenarios."""


class UsageError(NanopipeError):
    """API misuse detected at runtime: illegal state transitions, double completes, double releases."""


class ProtocolError(NanopipeError):
    """Malformed wire bytes on encode or decode."""


class MetricsError(NanopipeError):
    """Trace too short or otherwise unusable for metric extraction."""


class OracleUnavailable(NanopipeError):
    """The analytic period oracle does not cover the requested pipeline shape."""
