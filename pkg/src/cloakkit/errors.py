"""Exception hierarchy shared across the package.

Plain ``ValueError`` is used for per-operation argument violations (shape
mismatches, out-of-range timesteps).  The classes below exist so the CLI can
map failure categories onto distinct exit codes.
"""

from __future__ import annotations


class CloakkitError(Exception):
    """Base class for package-level failures."""


class ConfigError(CloakkitError):
    """Bad or inconsistent configuration (CLI exit code 2)."""


class DataError(CloakkitError):
    """Broken dataset, manifest, or tensor file (CLI exit code 3)."""


class NumericError(CloakkitError):
    """Non-finite loss or other numerical blow-up (CLI exit code 4)."""
