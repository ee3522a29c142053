"""Exception hierarchy with stable one-word categories for CLI reporting."""
from __future__ import annotations


class CleanfieldError(Exception):
    """Base class; ``category`` feeds the machine-parsable CLI error line."""

    category = "error"


class InvalidInputError(CleanfieldError):
    category = "invalid-input"


class UnderDeterminedError(CleanfieldError):
    category = "under-determined"


class SingularFitError(CleanfieldError):
    category = "singular-fit"


class InvalidSplitError(CleanfieldError):
    category = "invalid-split"


class DegenerateBatchError(CleanfieldError):
    category = "degenerate-batch"


class FormatError(CleanfieldError):
    category = "format"


class ConfigError(CleanfieldError):
    category = "config"


class UsageError(CleanfieldError):
    category = "usage"
