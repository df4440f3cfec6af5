"""Completeness / non-redundancy check of a plan and the detect-revise loop."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from .errors import DetectParseError
from .gateway import Gateway
from .plan import Plan, Query
from .templates import DEFAULT_TEMPLATES, TemplateSet

logger = logging.getLogger(__name__)

PASS_PHRASE = "The plan satisfies completeness and non-redundancy."

_ANALYSE = re.compile(r"Analy[sz](?:e|is)\s*:\s*(.*?)(?=\n\s*Suggestions?\s*:|\Z)", re.S | re.I)
_SUGGEST = re.compile(r"Suggestions?\s*:\s*(.*)\Z", re.S | re.I)


@dataclass(frozen=True)
class DetectionReport:
    complete: bool
    non_redundant: bool
    analysis: str
    suggestions: str = ""

    @property
    def passed(self) -> bool:
        return self.complete and self.non_redundant

    def to_dict(self) -> dict:
        return {
            "complete": self.complete,
            "non_redundant": self.non_redundant,
            "analysis": self.analysis,
            "suggestions": self.suggestions,
        }


def _flag(analysis: str, principle: str) -> bool | None:
    text = analysis.lower()
    if re.search(rf"(does not|doesn't|do not|fails to) satisfy (the )?{principle}", text):
        return False
    if re.search(rf"satisf(y|ies) (the )?{principle}", text):
        return True
    return None


def parse_detection(text: str) -> DetectionReport:
    if PASS_PHRASE in text:
        return DetectionReport(True, True, text.strip(), "")
    match = _ANALYSE.search(text)
    if not match or not match.group(1).strip():
        raise DetectParseError("detector output has neither the pass phrase nor an Analyse section")
    analysis = match.group(1).strip()
    sugg = _SUGGEST.search(text[match.end() :])
    suggestions = sugg.group(1).strip() if sugg else ""
    complete = _flag(analysis, "completeness")
    non_redundant = _flag(analysis, "non-redundancy")
    if complete is None and non_redundant is None:
        complete = non_redundant = False
    else:
        complete = True if complete is None else complete
        non_redundant = True if non_redundant is None else non_redundant
    if complete and non_redundant:
        # no pass phrase means the detector did not sign off
        logger.info("detector analysed the plan as fine but omitted the pass phrase; treating as violated")
        complete = non_redundant = False
    return DetectionReport(complete, non_redundant, analysis, suggestions)


def render_subtasks(plan: Plan) -> str:
    return "\n".join(
        f"Subtask {s.id}: {s.task}    Dependency: [{', '.join(str(d) for d in s.deps)}]" for s in plan
    )


class PlanDetector:
    def __init__(self, gateway: Gateway, templates: TemplateSet = DEFAULT_TEMPLATES):
        self.gateway = gateway
        self.templates = templates

    def detect(self, query: Query, plan: Plan) -> DetectionReport:
        system, user = self.templates.render("detector", query=query.text, subtasks=render_subtasks(plan))
        try:
            return parse_detection(self.gateway.chat(system, user, tag="detect"))
        except DetectParseError:
            hint = f"\nAnswer with 'Analyse: ...' and 'Suggestions: ...', or just '{PASS_PHRASE}'"
            return parse_detection(self.gateway.chat(system, user + hint, tag="detect"))

    def revise(self, query: Query, plan: Plan, report: DetectionReport, planner) -> Plan:
        if report.passed:
            raise ValueError("report shows no violation; nothing to revise")
        return planner.revise(query, plan, report.analysis, report.suggestions)

    def refine(self, query: Query, plan: Plan, planner, max_rounds: int = 2):
        """Run detect -> revise at most ``max_rounds`` times.

        Returns ``(plan, reports, warning)``; ``warning`` is true when the
        budget ran out before the detector signed off.
        """
        reports: list[DetectionReport] = []
        for _ in range(max_rounds):
            report = self.detect(query, plan)
            reports.append(report)
            if report.passed:
                return plan, reports, False
            plan = self.revise(query, plan, report, planner)
        if max_rounds > 0:
            logger.warning("plan for %s still flagged after %d detector round(s)", query.id, max_rounds)
        return plan, reports, max_rounds > 0
