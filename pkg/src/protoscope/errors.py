"""Exception taxonomy for the engine.

Every error raised by the public API derives from :class:`EngineError`, so
callers can catch one base class at pipeline boundaries.  The CLI maps the
taxonomy onto exit codes (see ``protoscope.cli``).
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class IoError(EngineError):
    """Filesystem-level failure (unreadable/unwritable path)."""


class FormatError(EngineError):
    """Malformed tensor container: bad magic, bad rank, truncated payload."""


class ManifestError(EngineError):
    """Manifest file is missing, unparsable, or references missing artifacts."""


class ValidationError(EngineError):
    """Well-formed input that violates a documented precondition."""


class ShapeError(ValidationError):
    """Arrays whose dimensions do not line up for the requested operation."""


class DegenerateSaliencyError(ValidationError):
    """Saliency map unusable for the operation (e.g. constant, all-zero)."""


class EmptyMaskError(ValidationError):
    """Binary mask with no active cell where at least one is required."""


class DegenerateOutputError(ValidationError):
    """Output vectors unusable for the metric (e.g. both sides all-zero)."""


class DegenerateSeriesError(ValidationError):
    """Score series unusable for the metric (e.g. max <= 0)."""


class SuiteError(EngineError):
    """A requested metric suite cannot run on the supplied bundle at all."""


class UsageError(EngineError):
    """Bad command-line usage (unknown subcommand, missing argument)."""
