"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` (e.g. ``"malformed-id"``)
so callers and the CLI can branch on the failure kind without string matching.
"""

from __future__ import annotations


class RoutineFlowError(Exception):
    code = "error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class RoutineError(RoutineFlowError):
    """Malformed routine documents, step ids and cursor misuse."""


class ToolError(RoutineFlowError):
    """Registry, dispatch and tool-call parsing failures."""


class ClientError(RoutineFlowError):
    """A model client could not produce a reply."""


class PipelineError(RoutineFlowError):
    pass


class EvaluationError(RoutineFlowError):
    pass
