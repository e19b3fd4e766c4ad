"""Exception hierarchy shared across the pipeline.

Data problems, backend transport problems, and workflow conflicts get
distinct types so the CLI can map them onto stable exit codes.
"""


class GuidebenchError(Exception):
    """Base class for all library errors."""


class EmptyInputError(GuidebenchError):
    """An operation received an empty document, corpus, or sample list."""


class StructuralError(GuidebenchError):
    """Malformed input structure (heading hierarchy, markers, schemas).

    Carries an optional line number so CLI diagnostics can point at the
    offending line.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NotFoundError(GuidebenchError):
    """A referenced id (chunk, assignment, item) does not exist."""


class ConflictError(GuidebenchError):
    """A write raced with or repeated a previous write (double submit)."""


class ConfigurationError(GuidebenchError):
    """Invalid run configuration (bad redundancy, unknown backend, ...)."""


class BackendError(GuidebenchError):
    """A pluggable backend (text generation, embedding) failed.

    ``retryable`` hints whether the caller may retry the call.
    """

    def __init__(self, message: str, retryable: bool = False):
        self.retryable = retryable
        super().__init__(message)


class McqParseError(GuidebenchError):
    """No well-formed MCQ block could be parsed; carries all diagnostics."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("no well-formed MCQ blocks: " + "; ".join(diagnostics))


class ForgeParseError(GuidebenchError):
    """Backend output did not match the scenario kind's response schema."""


class DataGapError(GuidebenchError):
    """A knowledge-base lookup has no coverage for the requested key."""


class StateError(GuidebenchError):
    """An illegal lifecycle transition or precondition on record state."""
