"""Plan data model: queries, agent roster, sub-task DAG.

Plans are immutable.  Every constructor path goes through
:func:`validate_plan`, so a ``Plan`` in hand always has unique ids,
resolvable dependencies, no cycles and (when a roster is supplied) only
known agent names.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Sequence

from .errors import PlanParseError, PlanValidationError, SpliceError

AGENT_KINDS = ("code", "math", "search", "commonsense", "custom")


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("query text must be non-empty")


@dataclass(frozen=True)
class AgentDescriptor:
    name: str
    description: str
    kind: str = "custom"

    def __post_init__(self):
        if not self.name:
            raise ValueError("agent name must be non-empty")
        if not self.description or not self.description.strip():
            raise ValueError(f"agent {self.name!r} needs a description")
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"agent kind must be one of {AGENT_KINDS}, got {self.kind!r}")


def check_roster(roster: Sequence[AgentDescriptor]) -> None:
    if not roster:
        raise ValueError("roster must be non-empty")
    names = [a.name for a in roster]
    if len(set(names)) != len(names):
        raise ValueError(f"agent names must be unique: {names}")


def render_roster(roster: Sequence[AgentDescriptor]) -> str:
    """``[code_agent: ... math_agent: ...]`` as interpolated into planner prompts."""
    return "[" + " ".join(f"{a.name}: {a.description}" for a in roster) + "]"


# The four agents used throughout the experiments, with the wording of the
# planner prompt.
DEFAULT_ROSTER = (
    AgentDescriptor("code_agent", "Generate code in Python for precise computations to solve the given task.", "code"),
    AgentDescriptor("math_agent", "Answer math questions by reasoning step-by-step.", "math"),
    AgentDescriptor("search_agent", "Call Bing Search API for obtaining information regarding the given task.", "search"),
    AgentDescriptor("commonsense_agent", "Answer the given question using commonsense reasoning.", "commonsense"),
)


@dataclass(frozen=True)
class SubTask:
    id: int
    task: str
    agent_name: str
    reason: str = ""
    deps: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "deps", tuple(self.deps))

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "id": self.id,
            "name": self.agent_name,
            "reason": self.reason,
            "dep": list(self.deps),
        }


@dataclass(frozen=True)
class Plan:
    query_id: str
    subtasks: tuple[SubTask, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "subtasks", tuple(self.subtasks))

    def __len__(self) -> int:
        return len(self.subtasks)

    def __iter__(self):
        return iter(self.subtasks)

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.subtasks]

    def get(self, subtask_id: int) -> SubTask:
        for s in self.subtasks:
            if s.id == subtask_id:
                return s
        raise KeyError(subtask_id)

    def __contains__(self, subtask_id: object) -> bool:
        return any(s.id == subtask_id for s in self.subtasks)

    def replace_subtask(self, new: SubTask) -> "Plan":
        return Plan(self.query_id, tuple(new if s.id == new.id else s for s in self.subtasks))

    def successors(self, subtask_id: int) -> list[int]:
        return [s.id for s in self.subtasks if subtask_id in s.deps]

    def ancestors(self, subtask_id: int) -> set[int]:
        seen: set[int] = set()
        stack = list(self.get(subtask_id).deps)
        while stack:
            dep = stack.pop()
            if dep not in seen:
                seen.add(dep)
                stack.extend(self.get(dep).deps)
        return seen

    def topological_order(self) -> list[int]:
        """Dependency-respecting order; ties broken by position in the plan."""
        sorter = TopologicalSorter({s.id: s.deps for s in self.subtasks})
        position = {s.id: i for i, s in enumerate(self.subtasks)}
        sorter.prepare()
        order: list[int] = []
        while sorter.is_active():
            ready = sorted(sorter.get_ready(), key=position.__getitem__)
            order.extend(ready)
            sorter.done(*ready)
        return order

    def to_json(self) -> list[dict]:
        return [s.to_json() for s in self.subtasks]


def answer_sentence(task: str, answer: str) -> str:
    """History line for one upstream sub-task."""
    answer = answer.strip()
    return f"The answer of '{task}' is {answer[:-1] if answer.endswith('.') else answer}."


def validate_plan(plan: Plan, roster: Sequence[AgentDescriptor] | None = None) -> Plan:
    """Check every structural invariant; return the plan unchanged or raise."""
    if not plan.subtasks:
        raise PlanValidationError("empty", "plan has no sub-tasks")
    ids = plan.ids
    seen: set[int] = set()
    for i in ids:
        if i in seen:
            raise PlanValidationError("duplicate_id", f"sub-task id {i} appears more than once")
        seen.add(i)
    if roster is not None:
        known = {a.name for a in roster}
        for s in plan.subtasks:
            if s.agent_name not in known:
                raise PlanValidationError("unknown_agent", f"sub-task {s.id} names unknown agent {s.agent_name!r}")
    for s in plan.subtasks:
        if s.id in s.deps:
            raise PlanValidationError("self_dep", f"sub-task {s.id} depends on itself")
        for d in s.deps:
            if d not in seen:
                raise PlanValidationError("missing_dep", f"sub-task {s.id} depends on unknown id {d}")
    try:
        TopologicalSorter({s.id: s.deps for s in plan.subtasks}).prepare()
    except CycleError as exc:
        raise PlanValidationError("cycle", f"dependency cycle through {exc.args[1]}") from None
    return plan


# ---------------------------------------------------------------------------
# JSON wire format


def serialize_plan(plan: Plan) -> str:
    return json.dumps(plan.to_json(), indent=4, ensure_ascii=False)


def extract_json_array(raw: str) -> list:
    """First well-formed JSON array in ``raw``; prose and code fences are skipped."""
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\[", raw):
        try:
            value, _ = decoder.raw_decode(raw, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, list) and (not value or isinstance(value[0], dict)):
            return value
    raise PlanParseError("no JSON array of sub-task objects found in planner output")


def _as_int(value, what: str) -> int:
    if isinstance(value, bool):
        raise PlanParseError(f"{what} must be an integer, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str) and value.strip().lstrip("-").isdigit():
        return int(value.strip())
    if isinstance(value, float) and value.is_integer():
        return int(value)
    raise PlanParseError(f"{what} must be an integer, got {value!r}")


def subtasks_from_json(items: Iterable) -> list[SubTask]:
    out = []
    for pos, item in enumerate(items):
        if not isinstance(item, dict):
            raise PlanParseError(f"entry {pos} is not an object")
        missing = [k for k in ("task", "id", "name", "reason", "dep") if k not in item]
        if missing:
            raise PlanParseError(f"entry {pos} is missing field(s) {missing}")
        deps = item["dep"]
        if deps is None:
            deps = []
        elif not isinstance(deps, list):
            deps = [deps]
        name = item["name"]
        if isinstance(name, list):
            name = name[0] if name else ""
        task = str(item["task"]).strip()
        if not task:
            raise PlanParseError(f"entry {pos} has an empty task")
        out.append(
            SubTask(
                id=_as_int(item["id"], "id"),
                task=task,
                agent_name=str(name),
                reason=str(item["reason"]),
                deps=tuple(_as_int(d, "dep") for d in deps),
            )
        )
    return out


def parse_plan(raw: str, roster: Sequence[AgentDescriptor] | None, query_id: str = "") -> Plan:
    items = extract_json_array(raw)
    plan = Plan(query_id, tuple(subtasks_from_json(items)))
    return validate_plan(plan, roster)


def candidate_agents(raw: str) -> dict[int, list[str]]:
    """Map sub-task id to every agent named for it (``name`` may be a list)."""
    out = {}
    for item in extract_json_array(raw):
        if isinstance(item, dict) and "id" in item:
            names = item.get("name")
            out[_as_int(item["id"], "id")] = [str(n) for n in (names if isinstance(names, list) else [names])]
    return out


# ---------------------------------------------------------------------------
# splicing


def splice(plan: Plan, subtask_id: int, replacements: Sequence[SubTask],
           roster: Sequence[AgentDescriptor] | None = None) -> Plan:
    """Replace one sub-task by a small sub-plan.

    ``replacements`` carry the ids the planner chose; they are re-numbered
    from ``max(plan.ids) + 1`` in order.  A dep naming another replacement is
    local, any other dep must name a surviving sub-task of ``plan``.  When no
    replacement declares a dep the replacements are chained linearly.  Roots
    of the new sub-plan inherit the original's deps and every former consumer
    of the original is rewired onto the sinks of the sub-plan (for a chain:
    the last replacement).
    """
    original = plan.get(subtask_id)
    if not replacements:
        raise SpliceError("plan-in-detail returned no sub-tasks")
    local_ids = [r.id for r in replacements]
    if len(set(local_ids)) != len(local_ids):
        raise PlanValidationError("duplicate_id", "replacement sub-tasks reuse an id")

    start = max(plan.ids) + 1
    fresh = {old: start + k for k, old in enumerate(local_ids)}
    explicit = any(r.deps for r in replacements)

    new_tasks: list[SubTask] = []
    for k, r in enumerate(replacements):
        if not explicit:
            deps = original.deps if k == 0 else (fresh[local_ids[k - 1]],)
        else:
            local = [fresh[d] for d in r.deps if d in fresh]
            external = [d for d in r.deps if d not in fresh]
            for d in external:
                if d == subtask_id:
                    raise SpliceError(f"replacement depends on the sub-task {subtask_id} it replaces")
                if d not in plan:
                    raise PlanValidationError("missing_dep", f"replacement depends on unknown id {d}")
            deps = local + external if local else list(original.deps) + [d for d in external if d not in original.deps]
        new_tasks.append(replace(r, id=fresh[r.id], deps=tuple(dict.fromkeys(deps))))

    used_as_dep = {d for t in new_tasks for d in t.deps}
    sinks = tuple(t.id for t in new_tasks if t.id not in used_as_dep)

    out: list[SubTask] = []
    for s in plan.subtasks:
        if s.id == subtask_id:
            out.extend(new_tasks)
        elif subtask_id in s.deps:
            deps: list[int] = []
            for d in s.deps:
                deps.extend(sinks if d == subtask_id else (d,))
            out.append(replace(s, deps=tuple(dict.fromkeys(deps))))
        else:
            out.append(s)
    spliced = Plan(plan.query_id, tuple(out))
    try:
        return validate_plan(spliced, roster)
    except PlanValidationError as exc:
        if exc.kind == "cycle":
            raise SpliceError(str(exc)) from None
        raise
