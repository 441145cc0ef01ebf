"""Error classes shared across the engine.

The CLI maps ``UsageError`` to exit code 1 and every other engine error
(plus I/O failures) to exit code 2.
"""


class GraphPoolError(Exception):
    """Base class for all engine errors."""

    exit_code = 2


class UsageError(GraphPoolError):
    """An API or command-line surface was called incorrectly."""

    exit_code = 1


class FormatError(GraphPoolError):
    """A binary file does not carry the expected magic/version/dtype."""


class CorruptionError(GraphPoolError):
    """Declared counts and actual payload length disagree."""


class DataError(GraphPoolError):
    """Input data violates a content invariant (non-finite, empty class...)."""


class ParseError(GraphPoolError):
    """A text line does not match the documented grammar."""


class ManifestLookupError(GraphPoolError):
    """A referenced utterance id is absent from the manifest."""


class DomainError(GraphPoolError):
    """An argument lies outside the mathematical domain of the operation."""


class ShapeError(GraphPoolError):
    """Operand shapes are incompatible."""


class NumericError(GraphPoolError):
    """A computation produced NaN/Inf or hit a numeric singularity."""


class DeterminismError(GraphPoolError):
    """Two forward passes of a supposedly pure function disagreed."""


class DegenerateWeightsError(GraphPoolError):
    """Layer-weight sum collapsed below the training guard threshold."""
