"""Routing controller and plan executor.

``answer_query`` runs the whole pipeline: fast decomposition, routing of
every sub-task until the plan settles, the completeness/redundancy detector,
dependency-ordered execution, synthesis of the final answer and, on full
success, feedback into the representative works.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from graphlib import TopologicalSorter
from pathlib import Path
from typing import Sequence

from .agents import Agent, ExecutionRecord, failed
from .detector import DetectionReport, PlanDetector
from .errors import (
    AOPError,
    JudgeParseError,
    ReplanBudgetExhausted,
    ScriptMiss,
    StabilizationBudgetExhausted,
)
from .gateway import Gateway, UsageReport
from .plan import AgentDescriptor, Plan, Query, SubTask, answer_sentence, check_roster, validate_plan
from .planner import MetaPlanner
from .templates import DEFAULT_TEMPLATES, TemplateSet
from .works import NO_WORKS, WorksStore

logger = logging.getLogger(__name__)

TRACE_VERSION = 1


@dataclass(frozen=True)
class RoutingConfig:
    tau_high: float = 7.0
    tau_low: float = 1.0
    tau_sim: float = 0.80
    max_replans: int = 2
    max_detector_rounds: int = 2
    l_fraction: float = 0.5
    # total replan / re-describe / plan-in-detail calls per query
    max_modifications: int = 8
    reassign_on_redescribe: bool = True
    detect_before_routing: bool = False

    def __post_init__(self):
        if not self.tau_low < self.tau_high:
            raise ValueError("tau_low must be below tau_high")
        if not 0.0 < self.tau_sim <= 1.0:
            raise ValueError("tau_sim must lie in (0, 1]")
        if min(self.max_replans, self.max_detector_rounds, self.max_modifications) < 0:
            raise ValueError("budgets must be non-negative")
        if not 0.0 < self.l_fraction <= 1.0:
            raise ValueError("l_fraction must lie in (0, 1]")


class Route(str, Enum):
    ACCEPT = "accept"
    REASSIGN = "reassign"
    REPLAN = "replan"
    REDESCRIBE = "re_describe"
    PLAN_IN_DETAIL = "plan_in_detail"


@dataclass(frozen=True)
class RoutingDecision:
    kind: Route
    subtask_id: int
    agent_name: str
    assigned_score: float
    best_agent: str | None = None
    best_score: float | None = None
    similarity: float | None = None
    witness_work: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        if d["similarity"] == NO_WORKS:
            d["similarity"] = None
        return d


def route(
    subtask: SubTask,
    roster: Sequence[AgentDescriptor],
    model,
    store: WorksStore | None,
    cfg: RoutingConfig,
    redescribed: bool = False,
) -> RoutingDecision:
    """Five-way decision for one sub-task.

    ``model`` needs ``predict_one(text, description)`` and
    ``predict_all(text, roster)``.  A sub-task that was already re-described
    skips the re-describe branch.
    """
    by_name = {a.name: a for a in roster}
    s0 = float(model.predict_one(subtask.task, by_name[subtask.agent_name].description))
    if s0 >= cfg.tau_high:
        return RoutingDecision(Route.ACCEPT, subtask.id, subtask.agent_name, s0)
    scores = model.predict_all(subtask.task, roster)
    best_agent, best = scores[0]
    for name, s in scores[1:]:
        if s > best:
            best_agent, best = name, s
    best = float(best)
    common = dict(subtask_id=subtask.id, assigned_score=s0, best_agent=best_agent, best_score=best)
    if best <= cfg.tau_low:
        return RoutingDecision(Route.REPLAN, agent_name=subtask.agent_name, **common)
    if best >= cfg.tau_high:
        kind = Route.ACCEPT if best_agent == subtask.agent_name else Route.REASSIGN
        return RoutingDecision(kind, agent_name=best_agent, **common)
    if store is not None and not redescribed:
        report = store.best_match(subtask.task, roster)
        sim = report.global_best.sim
        if sim >= cfg.tau_sim:
            return RoutingDecision(
                Route.REDESCRIBE,
                agent_name=report.global_best.agent_name,
                similarity=sim,
                witness_work=report.global_best.work,
                **common,
            )
        return RoutingDecision(Route.PLAN_IN_DETAIL, agent_name=subtask.agent_name, similarity=sim, **common)
    return RoutingDecision(Route.PLAN_IN_DETAIL, agent_name=subtask.agent_name, **common)


class AcceptAll:
    """Stand-in reward model that accepts every assignment."""

    def __init__(self, score: float = 8.0):
        self.score = score

    def predict_one(self, subtask: str, description: str) -> float:
        return self.score

    def predict_all(self, subtask: str, roster) -> list[tuple[str, float]]:
        return [(a.name, self.score) for a in roster]


# ---------------------------------------------------------------------------
# trace


VOLATILE_KEYS = frozenset({"started_at", "finished_at", "wall_time", "latency_ms", "added_at", "elapsed"})


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


def trace_digest(trace: "RunTrace | dict") -> str:
    """Hash of a trace with timestamps and timings removed."""
    data = trace.to_dict() if isinstance(trace, RunTrace) else trace
    return hashlib.sha256(json.dumps(_strip(data), sort_keys=True).encode()).hexdigest()


@dataclass
class RunTrace:
    query: Query
    plans: list[dict] = field(default_factory=list)
    decisions: list[RoutingDecision] = field(default_factory=list)
    detector_reports: list[DetectionReport] = field(default_factory=list)
    detector_warning: bool = False
    records: list[ExecutionRecord] = field(default_factory=list)
    execution_order: list[int] = field(default_factory=list)
    final_answer: str = ""
    status: str = "ok"
    errors: list[dict] = field(default_factory=list)
    correct: bool | None = None
    usage: dict = field(default_factory=dict)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_at: str = ""

    def add_plan(self, plan: Plan, cause: str) -> None:
        self.plans.append({"cause": cause, "subtasks": plan.to_json()})

    def add_error(self, stage: str, exc: BaseException) -> None:
        self.errors.append({"stage": stage, "type": type(exc).__name__, "message": str(exc)})

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def to_dict(self) -> dict:
        return {
            "version": TRACE_VERSION,
            "query": {"id": self.query.id, "text": self.query.text},
            "plans": self.plans,
            "decisions": [d.to_dict() for d in self.decisions],
            "detector_reports": [r.to_dict() for r in self.detector_reports],
            "detector_warning": self.detector_warning,
            "records": [r.to_dict() for r in self.records],
            "execution_order": self.execution_order,
            "final_answer": self.final_answer,
            "status": self.status,
            "errors": self.errors,
            "correct": self.correct,
            "usage": self.usage,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", self.query.id) or "query"
        path = directory / f"{safe}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path


def _usage_delta(before: UsageReport, after: UsageReport) -> dict:
    out = {}
    for tag, row in after.rows.items():
        prev = before.rows.get(tag)
        delta = {
            "prompt_tokens": row.prompt_tokens - (prev.prompt_tokens if prev else 0),
            "completion_tokens": row.completion_tokens - (prev.completion_tokens if prev else 0),
            "calls": row.calls - (prev.calls if prev else 0),
            "wall_time": row.wall_time - (prev.wall_time if prev else 0.0),
        }
        if delta["calls"]:
            out[tag] = delta
    return dict(sorted(out.items()))


def history_text(plan: Plan, subtask_id: int, answers: dict[int, str], order: Sequence[int]) -> str:
    """``The answer of '<task>' is <answer>.`` for each transitive dependency, in execution order."""
    wanted = plan.ancestors(subtask_id)
    parts = [answer_sentence(plan.get(i).task, answers[i]) for i in order if i in wanted and i in answers]
    return " ".join(parts) if parts else "None"


# ---------------------------------------------------------------------------
# orchestrator


class Orchestrator:
    def __init__(
        self,
        roster: Sequence[AgentDescriptor],
        gateway: Gateway,
        planner: MetaPlanner,
        agents: dict[str, Agent],
        reward_model=None,
        store: WorksStore | None = None,
        detector: PlanDetector | None = None,
        cfg: RoutingConfig = RoutingConfig(),
        concurrency: int = 4,
        trace_dir: str | Path | None = None,
        templates: TemplateSet = DEFAULT_TEMPLATES,
    ):
        check_roster(roster)
        self.roster = tuple(roster)
        self.gateway = gateway
        self.planner = planner
        self.agents = agents
        self.reward_model = reward_model if reward_model is not None else AcceptAll()
        self.store = store
        self.detector = detector
        self.cfg = cfg
        self.concurrency = max(1, concurrency)
        self.trace_dir = trace_dir
        self.templates = templates
        missing = [a.name for a in self.roster if a.name not in agents]
        if missing:
            raise ValueError(f"no agent adapter for {missing}")

    # -- routing -----------------------------------------------------------

    def route(self, subtask: SubTask, redescribed: bool = False) -> RoutingDecision:
        return route(subtask, self.roster, self.reward_model, self.store, self.cfg, redescribed)

    def stabilize(self, query: Query, plan: Plan, trace: RunTrace | None = None) -> Plan:
        """Route every sub-task, applying modifications until the plan settles."""
        trace = trace if trace is not None else RunTrace(query)
        validate_plan(plan, self.roster)
        if self.detector is not None and self.cfg.detect_before_routing:
            plan = self._refine(query, plan, trace)
        pending = deque(plan.ids)
        redescribed: set[int] = set()
        modifications = 0
        while pending:
            sid = pending.popleft()
            if sid not in plan:
                continue
            sub = plan.get(sid)
            decision = self.route(sub, redescribed=sid in redescribed)
            trace.decisions.append(decision)
            if decision.kind is Route.ACCEPT:
                continue
            if decision.kind is Route.REASSIGN:
                plan = plan.replace_subtask(replace(sub, agent_name=decision.agent_name))
                trace.add_plan(plan, f"reassign:{sid}")
                continue
            if modifications >= self.cfg.max_modifications:
                raise StabilizationBudgetExhausted(f"more than {self.cfg.max_modifications} modifications", plan)
            modifications += 1
            if decision.kind is Route.REPLAN:
                try:
                    plan = self.planner.replan(query, plan, sid)
                except ReplanBudgetExhausted as exc:
                    raise StabilizationBudgetExhausted(str(exc), plan) from exc
                trace.add_plan(plan, f"replan:{sid}")
                pending = deque(plan.ids)
                redescribed.clear()
            elif decision.kind is Route.REDESCRIBE:
                new = self.planner.re_describe(sub, decision.witness_work)
                if self.cfg.reassign_on_redescribe:
                    new = replace(new, agent_name=decision.agent_name)
                plan = plan.replace_subtask(new)
                trace.add_plan(plan, f"re_describe:{sid}")
                redescribed.add(sid)
                pending.appendleft(sid)
            else:
                before = set(plan.ids)
                plan = self.planner.plan_in_detail(query, plan, sid)
                trace.add_plan(plan, f"plan_in_detail:{sid}")
                pending.extendleft(reversed([i for i in plan.ids if i not in before]))
        if self.detector is not None and not self.cfg.detect_before_routing:
            plan = self._refine(query, plan, trace)
        return plan

    def _refine(self, query: Query, plan: Plan, trace: RunTrace) -> Plan:
        refined, reports, warning = self.detector.refine(query, plan, self.planner, self.cfg.max_detector_rounds)
        trace.detector_reports.extend(reports)
        trace.detector_warning = trace.detector_warning or warning
        if refined is not plan:
            trace.add_plan(refined, "detector")
        return refined

    # -- execution ---------------------------------------------------------

    def _run_one(self, sub: SubTask, history: str) -> ExecutionRecord:
        agent = self.agents[sub.agent_name]
        try:
            return agent.run(sub, history)
        except ScriptMiss:
            raise
        except Exception as exc:  # agent failure must not take down sibling branches
            logger.warning("sub-task %s failed on %s: %s", sub.id, sub.agent_name, exc)
            return failed(sub, sub.agent_name, f"{type(exc).__name__}: {exc}")

    def execute_plan(self, plan: Plan, trace: RunTrace | None = None) -> list[ExecutionRecord]:
        """Execute in dependency waves; sub-tasks inside a wave run concurrently.

        Descendants of a failed sub-task are marked failed without calling
        their agent.  Records come back in visit order.
        """
        position = {s.id: i for i, s in enumerate(plan)}
        sorter = TopologicalSorter({s.id: s.deps for s in plan})
        sorter.prepare()
        answers: dict[int, str] = {}
        order: list[int] = []
        records: list[ExecutionRecord] = []
        broken: set[int] = set()
        with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
            while sorter.is_active():
                ready = sorted(sorter.get_ready(), key=position.__getitem__)
                runnable = []
                for sid in ready:
                    sub = plan.get(sid)
                    if any(d in broken for d in sub.deps):
                        broken.add(sid)
                        records.append(failed(sub, sub.agent_name, "AgentFailure: dependency failed"))
                    else:
                        runnable.append(sub)
                histories = [history_text(plan, s.id, answers, order) for s in runnable]
                results = list(pool.map(self._run_one, runnable, histories))
                for sub, rec in zip(runnable, results):
                    order.append(sub.id)
                    records.append(rec)
                    if rec.status == "ok":
                        answers[sub.id] = rec.answer
                    else:
                        broken.add(sub.id)
                sorter.done(*ready)
        if trace is not None:
            trace.records = records
            trace.execution_order = order
        return records

    # -- answer ------------------------------------------------------------

    def synthesize_answer(self, query: Query, plan: Plan, records: Sequence[ExecutionRecord]) -> str:
        ok = [r for r in records if r.status == "ok"]
        if not ok:
            raise ValueError("no successful sub-task to synthesise from")
        if len(plan) == 1:
            return ok[0].response
        tasks = {s.id: s.task for s in plan}
        answers = "\n".join(answer_sentence(tasks[r.subtask_id], r.answer) for r in ok)
        system, user = self.templates.render("synthesize", query=query.text, answers=answers)
        return self.gateway.chat(system, user, tag="synthesize").strip()

    def evaluate(self, question: str, ground_truth: str, prediction: str) -> bool:
        system, user = self.templates.render(
            "evaluate", question=question, ground_truth=ground_truth, prediction=prediction or "(empty)"
        )
        text = self.gateway.chat(system, user, tag="evaluate")
        match = re.match(r"\W*([A-Za-z]+)", text)
        verdict = match.group(1).lower() if match else ""
        if verdict not in ("yes", "no"):
            raise JudgeParseError(f"judge answered {text[:60]!r}")
        return verdict == "yes"

    def answer_query(self, query: Query, ground_truth: str | None = None) -> tuple[str, RunTrace]:
        trace = RunTrace(query)
        before = self.gateway.usage_report()
        try:
            self._pipeline(query, ground_truth, trace)
        finally:
            trace.usage = _usage_delta(before, self.gateway.usage_report())
            trace.finished_at = datetime.now(timezone.utc).isoformat()
            if self.trace_dir is not None:
                trace.save(self.trace_dir)
        return trace.final_answer, trace

    def _pipeline(self, query: Query, ground_truth: str | None, trace: RunTrace) -> None:
        stage = "fast_plan"
        try:
            plan = self.planner.fast_plan(query)
            trace.add_plan(plan, "fast_plan")
            stage = "stabilize"
            try:
                plan = self.stabilize(query, plan, trace)
            except StabilizationBudgetExhausted as exc:
                trace.add_error(stage, exc)
                trace.status = "budget_exhausted"
                plan = exc.plan
            stage = "execute"
            records = self.execute_plan(plan, trace)
            stage = "synthesize"
            trace.final_answer = self.synthesize_answer(query, plan, records)
            all_ok = all(r.status == "ok" for r in records)
            if not all_ok and trace.status == "ok":
                trace.status = "failed"
                trace.errors.append({"stage": "execute", "type": "AgentFailure", "message": "some sub-tasks failed"})
            if ground_truth is not None:
                stage = "evaluate"
                trace.correct = self.evaluate(query.text, ground_truth, trace.final_answer)
            resolved = all_ok and trace.correct is not False
            if resolved and self.store is not None:
                stage = "feedback"
                self.store.record_success(plan, records)
        except (AOPError, ValueError) as exc:
            logger.error("query %s failed during %s: %s", query.id, stage, exc)
            trace.add_error(stage, exc)
            trace.status = "failed"
