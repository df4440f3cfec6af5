"""Meta-agent behaviours: fast decomposition, replan, plan-in-detail, re-describe."""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import replace
from typing import Sequence

from .errors import PlanParseError, ReplanBudgetExhausted, RewriteParseError
from .gateway import Gateway
from .plan import (
    AgentDescriptor,
    Plan,
    Query,
    SubTask,
    candidate_agents,
    check_roster,
    extract_json_array,
    parse_plan,
    render_roster,
    serialize_plan,
    splice,
    subtasks_from_json,
    validate_plan,
)
from .templates import DEFAULT_TEMPLATES, TemplateSet

logger = logging.getLogger(__name__)

JSON_REPROMPT = "\nOutput only the JSON array."
REWRITE_REPROMPT = "\nOutput only the rewritten sentence in the form ***rewritten***."

REPLAN_REASON = (
    "cannot be completely resolved by any single available agent. "
    "Output a revised plan for the whole user query in the json format above, "
    "so that every sub-task can be solved by one of the agents."
)
DETAIL_REASON = (
    "is too complex for any single available agent. Decompose only this sub-task "
    "into simpler sub-tasks in the json format above, avoiding any overlap with "
    "the other sub-tasks of the current plan."
)

_REWRITE = re.compile(r"\*\*\*(.+?)\*\*\*", re.S)
_QUOTES = "'\"‘’“”` "


def extract_rewrite(text: str) -> str:
    match = _REWRITE.search(text)
    if not match:
        raise RewriteParseError("no ***rewritten*** span in output")
    out = match.group(1).strip().strip(_QUOTES).strip()
    if not out:
        raise RewriteParseError("rewritten span is empty")
    return out


class MetaPlanner:
    """LLM-backed planner bound to one agent roster.

    Holds the only mutable state of the planning side: the per-query replan
    counter used to enforce ``max_replans``.
    """

    def __init__(
        self,
        gateway: Gateway,
        roster: Sequence[AgentDescriptor],
        templates: TemplateSet = DEFAULT_TEMPLATES,
        max_replans: int = 2,
    ):
        check_roster(roster)
        self.gateway = gateway
        self.roster = tuple(roster)
        self.templates = templates
        self.max_replans = max_replans
        self._replans: dict[str, int] = {}
        self._lock = threading.Lock()

    @property
    def roster_text(self) -> str:
        return render_roster(self.roster)

    def _ask_subtasks(self, template: str, tag: str, **values) -> list[SubTask]:
        """Call the planner for bare sub-tasks; re-prompt once on parse failure."""
        system, user = self.templates.render(template, roster=self.roster_text, **values)
        raw = self.gateway.chat(system, user, tag=tag)
        try:
            return subtasks_from_json(extract_json_array(raw))
        except PlanParseError:
            logger.info("%s: unparseable planner output, re-prompting once", tag)
        raw = self.gateway.chat(system, user + JSON_REPROMPT, tag=tag)
        return subtasks_from_json(extract_json_array(raw))

    def _plan_from(self, template: str, tag: str, query: Query, **values) -> tuple[Plan, str]:
        system, user = self.templates.render(template, roster=self.roster_text, query=query.text, **values)
        raw = self.gateway.chat(system, user, tag=tag)
        try:
            return parse_plan(raw, self.roster, query.id), raw
        except PlanParseError:
            logger.info("%s: malformed plan, re-prompting once", tag)
        raw = self.gateway.chat(system, user + JSON_REPROMPT, tag=tag)
        return parse_plan(raw, self.roster, query.id), raw

    # -- fast decomposition -------------------------------------------------

    def fast_plan(self, query: Query) -> Plan:
        return self._plan_from("fast_plan", "fast_plan", query, extra="")[0]

    def suggest_plan(self, query: Query, l: int) -> tuple[Plan, dict[int, list[str]]]:
        """Fast decomposition asking for the ``l`` best agents per sub-task.

        Returns the plan (first suggestion as assignee) and, per sub-task id,
        ``l`` distinct agent names.  Short suggestion lists are padded with
        the remaining roster agents in roster order.
        """
        if not 1 <= l <= len(self.roster):
            raise ValueError(f"l must lie in [1, {len(self.roster)}], got {l}")
        extra = (
            f'\nFor this request, "name" must be a list of the {l} most suitable '
            "agents for the sub-task, best first."
        )
        plan, raw = self._plan_from("fast_plan", "suggest_plan", query, extra=extra)
        known = [a.name for a in self.roster]
        raw_names = candidate_agents(raw)
        suggestions = {}
        for s in plan:
            picked = [n for n in dict.fromkeys(raw_names.get(s.id, [s.agent_name])) if n in known]
            picked += [n for n in known if n not in picked]
            suggestions[s.id] = picked[:l]
        return plan, suggestions

    # -- modifications ------------------------------------------------------

    def replans_used(self, query_id: str) -> int:
        with self._lock:
            return self._replans.get(query_id, 0)

    def replan(self, query: Query, plan: Plan, failing_subtask_id: int, reason: str = REPLAN_REASON) -> Plan:
        if failing_subtask_id not in plan:
            raise ValueError(f"sub-task {failing_subtask_id} is not in the plan")
        with self._lock:
            used = self._replans.get(query.id, 0)
            if used >= self.max_replans:
                raise ReplanBudgetExhausted(f"query {query.id!r} already replanned {used} time(s)")
            self._replans[query.id] = used + 1
        failing = plan.get(failing_subtask_id)
        return self._plan_from(
            "replan",
            "replan",
            query,
            plan=serialize_plan(plan),
            subtask=json.dumps(failing.to_json(), ensure_ascii=False),
            reason=reason,
        )[0]

    def plan_in_detail(self, query: Query, plan: Plan, subtask_id: int, reason: str = DETAIL_REASON) -> Plan:
        """Decompose one sub-task further and splice the result into ``plan``."""
        target = plan.get(subtask_id)
        replacements = self._ask_subtasks(
            "plan_in_detail",
            "plan_in_detail",
            query=query.text,
            plan=serialize_plan(plan),
            subtask=json.dumps(target.to_json(), ensure_ascii=False),
            reason=reason,
        )
        validate_plan(Plan(plan.query_id, tuple(replace(r, deps=()) for r in replacements)), self.roster)
        return splice(plan, subtask_id, replacements, self.roster)

    def re_describe(self, subtask: SubTask, example_work: str) -> SubTask:
        if not example_work or not example_work.strip():
            raise ValueError("example work must be non-empty")
        system, user = self.templates.render("re_describe", example=example_work, sentence=subtask.task)
        text = self.gateway.chat(system, user, tag="re_describe")
        try:
            rewritten = extract_rewrite(text)
        except RewriteParseError:
            text = self.gateway.chat(system, user + REWRITE_REPROMPT, tag="re_describe")
            rewritten = extract_rewrite(text)
        return replace(subtask, task=rewritten)

    def revise(self, query: Query, plan: Plan, analysis: str, suggestions: str) -> Plan:
        """Re-plan the query taking detector feedback into account."""
        return self._plan_from(
            "revise",
            "revise",
            query,
            plan=serialize_plan(plan),
            analysis=analysis or "(none)",
            suggestions=suggestions or "(none)",
        )[0]
