import pytest

from aoplan.detector import PASS_PHRASE, DetectionReport, PlanDetector, parse_detection, render_subtasks
from aoplan.errors import DetectParseError
from aoplan.plan import Query, parse_plan
from aoplan.planner import MetaPlanner

from helpers import ROSTER, plan_json, scripted

Q = Query("bn", "If a plane can carry 300 passengers and flies from Brazil to Nigeria with a full load, then returns "
                "with only 75% of its capacity, how many passengers are transported in total?")
PLAN = parse_plan(plan_json([
    (1, "math_agent", "Determine the number of passengers transported from Brazil to Nigeria in one flight with a full load.", []),
    (2, "math_agent", "Determine the number of passengers transported from Nigeria to Brazil in one flight with 75% of its capacity.", []),
    (3, "math_agent", "Calculate the total number of passengers transported between Brazil and Nigeria in one round trip.", [1, 2]),
]), ROSTER, "bn")
VERDICT = (
    "Analyse: This plan does not satisfy completeness because the subtask loses the information of "
    "'a plane can carry 300 passengers' of the original task. This plan satisfies non-redundancy because "
    "each subtask has a unique focus and there is no overlap in the information covered.\n"
    "Suggestions: Add the information of 'a plane can carry 300 passengers' to subtask 1 and subtask 2."
)


def test_pass_phrase():
    report = parse_detection(PASS_PHRASE)
    assert report.passed and report.suggestions == ""


def test_brazil_verdict():
    report = parse_detection(VERDICT)
    assert (report.complete, report.non_redundant) == (False, True)
    assert report.suggestions.startswith("Add the information of 'a plane can carry 300 passengers'")
    assert "Suggestions" not in report.analysis


def test_redundancy_only():
    text = ("Analysis: The plan satisfies completeness. It does not satisfy non-redundancy because subtasks 1 and 2 "
            "both ask for the population.\nSuggestions: Merge subtask 1 and subtask 2.")
    report = parse_detection(text)
    assert (report.complete, report.non_redundant) == (True, False)


def test_analysis_without_phrase_is_not_a_pass():
    report = parse_detection("Analyse: This plan satisfies completeness and satisfies non-redundancy.\nSuggestions: none")
    assert not report.passed


def test_unrelated_prose():
    with pytest.raises(DetectParseError):
        parse_detection("Looks reasonable to me.")


def test_detect_reprompts_once():
    gw = scripted({"tag": "detect", "matcher": "Answer with 'Analyse", "response": PASS_PHRASE},
                  {"tag": "detect", "matcher": "Task:", "response": "Seems fine."})
    assert PlanDetector(gw).detect(Q, PLAN).passed
    assert gw.usage_report().rows["detect"].calls == 2


def test_render_subtasks():
    lines = render_subtasks(PLAN).splitlines()
    assert lines[0] == ("Subtask 1: Determine the number of passengers transported from Brazil to Nigeria in one "
                        "flight with a full load.    Dependency: []")
    assert lines[2].endswith("Dependency: [1, 2]")


def test_revise_requires_violation():
    planner = MetaPlanner(scripted(), ROSTER)
    with pytest.raises(ValueError):
        PlanDetector(scripted()).revise(Q, PLAN, DetectionReport(True, True, "ok"), planner)


def test_revise_adds_capacity():
    fixed = plan_json([
        (1, "math_agent", "Passengers from Brazil to Nigeria on a full 300-passenger plane.", []),
        (2, "math_agent", "Passengers from Nigeria to Brazil at 75% of 300 passengers.", []),
        (3, "math_agent", "Add both.", [1, 2]),
    ])
    gw = scripted({"tag": "revise", "matcher": "re:(?s)loses the information.*300 passengers", "response": fixed})
    out = PlanDetector(gw).revise(Q, PLAN, parse_detection(VERDICT), MetaPlanner(gw, ROSTER))
    assert all("300" in s.task for s in out if s.id in (1, 2))


def test_refine_stops_on_pass():
    gw = scripted({"tag": "detect", "matcher": "Task:", "response": PASS_PHRASE})
    plan, reports, warning = PlanDetector(gw).refine(Q, PLAN, MetaPlanner(gw, ROSTER), max_rounds=2)
    assert plan is PLAN and len(reports) == 1 and not warning


def test_refine_zero_rounds():
    gw = scripted()
    plan, reports, warning = PlanDetector(gw).refine(Q, PLAN, MetaPlanner(gw, ROSTER), max_rounds=0)
    assert (plan, reports, warning) == (PLAN, [], False)
