"""
Exception hierarchy for gapflow.

Every error carries a stable machine-readable ``code`` and an optional
``details`` mapping; the CLI serializes both to a JSON line on failure.
"""

from typing import Any


class GapflowError(Exception):
    """Root of all gapflow errors."""

    code = "gapflow_error"

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details: dict[str, Any] = details

    def to_json(self) -> dict[str, Any]:
        """Machine-readable form used by the CLI error channel."""
        return {"error": self.code, "message": self.message, "details": self.details}


class DimensionError(GapflowError, ValueError):
    """Operand shapes are incompatible for the requested operation."""

    code = "dimension_error"


class ContractError(GapflowError, ValueError):
    """A precondition of an operation was violated by the caller."""

    code = "contract_error"


class SequenceLengthError(GapflowError, ValueError):
    """A token sequence exceeds the model context."""

    code = "sequence_length_error"


class MalformedImageError(GapflowError, ValueError):
    """An image token grid has the wrong length or out-of-vocabulary ids."""

    code = "malformed_image"


class QuestionGrammarError(GapflowError, ValueError):
    """A question does not follow the generated-question grammar."""

    code = "question_grammar_error"


class DegenerateInputError(GapflowError, ValueError):
    """Input is well-typed but carries nothing to compare (e.g. an empty caption)."""

    code = "degenerate_input"


class CurationError(GapflowError, RuntimeError):
    """No preference tuple survived curation."""

    code = "curation_failure"


class NonFiniteError(GapflowError, RuntimeError):
    """A loss or gradient became NaN/Inf during training."""

    code = "non_finite"


class RunDirectoryError(GapflowError, RuntimeError):
    """Run directory is locked, would be overwritten, or lacks an artifact."""

    code = "run_directory_error"
