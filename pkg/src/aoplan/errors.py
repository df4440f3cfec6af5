"""Exception hierarchy shared by all components."""

from __future__ import annotations


class AOPError(Exception):
    """Base class for every error raised by this package."""


# gateway
class BackendError(AOPError):
    """Non-retryable backend failure (bad request, auth, malformed payload)."""


class TransientBackendError(BackendError):
    """Transport failure or HTTP 5xx; eligible for retry."""


class BackendUnavailable(AOPError):
    """Raised once the retry budget is spent."""


class ScriptMiss(AOPError):
    """The scripted backend has no entry matching the request."""


class ReplayMiss(ScriptMiss):
    """A replayed run issued a request that is not in the recording."""


# planner
class PlanParseError(AOPError):
    pass


class PlanValidationError(AOPError):
    """A plan broke one of its structural invariants.

    ``kind`` is one of ``empty``, ``duplicate_id``, ``unknown_agent``,
    ``missing_dep``, ``self_dep`` or ``cycle``.
    """

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class SpliceError(PlanValidationError):
    def __init__(self, message: str):
        super().__init__("cycle", message)


class ReplanBudgetExhausted(AOPError):
    pass


class RewriteParseError(AOPError):
    pass


# reward model
class EmbeddingUnavailable(AOPError):
    pass


class ScoreParseError(AOPError):
    pass


class NumericalDivergence(AOPError):
    pass


# works store
class UnknownAgent(AOPError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class StoreCorrupt(AOPError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"record {index}: {message}")
        self.index = index


# detector
class DetectParseError(AOPError):
    pass


# orchestrator / agents
class StabilizationBudgetExhausted(AOPError):
    """Routing did not settle within budget; ``plan`` is the best plan so far."""

    def __init__(self, message: str, plan=None):
        super().__init__(message)
        self.plan = plan


class AgentFailure(AOPError):
    def __init__(self, subtask_id: int, message: str):
        super().__init__(f"sub-task {subtask_id}: {message}")
        self.subtask_id = subtask_id


class CodeExtractionError(AOPError):
    pass


class CodeExecutionError(AOPError):
    """``reason`` is ``timeout``, ``nonzero_exit`` or ``empty_stdout``."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class BoxedAnswerMissing(AOPError):
    pass


class SearchUnavailable(AOPError):
    pass


class EmptyResults(AOPError):
    pass


class JudgeParseError(AOPError):
    pass


class ConfigError(AOPError):
    pass
