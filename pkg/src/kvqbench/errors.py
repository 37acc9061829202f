"""Exception taxonomy and process exit codes.

Every failure the CLI can surface maps onto one of four exit codes:

    0  success
    1  property-check failure (a verified invariant did not hold)
    2  configuration error (invalid ratios, shapes, distribution specs, ...)
    3  trace I/O or file-format error

Library code raises the typed exceptions below; only the CLI translates them
into exit codes.
"""
from __future__ import annotations

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_IO_ERROR = 3


class WorkbenchError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = EXIT_CONFIG_ERROR


class ConfigError(WorkbenchError):
    """Invalid configuration value or inconsistent parameter combination."""

    exit_code = EXIT_CONFIG_ERROR


class FormatError(WorkbenchError):
    """Malformed or truncated trace/profile file.

    Messages carry the byte offset of the defect where meaningful.
    """

    exit_code = EXIT_IO_ERROR


class ProfilingError(WorkbenchError):
    """Threshold extraction failed (for example, too few elements)."""

    exit_code = EXIT_CONFIG_ERROR


class DegenerateDistributionError(ProfilingError):
    """Input distribution admits no valid threshold quad (it would collapse)."""


class CapacityError(WorkbenchError):
    """Paged memory pool exhausted; message names requested vs available bytes."""

    exit_code = EXIT_CONFIG_ERROR


class MmuLookupError(WorkbenchError):
    """Read of an unwritten (request, layer, kind, head) region or token range."""

    exit_code = EXIT_CONFIG_ERROR


class CheckFailure(WorkbenchError):
    """A property check ran to completion and found violations."""

    exit_code = EXIT_CHECK_FAILURE
