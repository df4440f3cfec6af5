import pytest

from aoplan.agents import (
    CodeAgent,
    CommonsenseAgent,
    FixtureSearchClient,
    MathAgent,
    SearchAgent,
    Snippet,
    StubExecutor,
    SubprocessExecutor,
    build_agents,
    extract_boxed,
    extract_code,
)
from aoplan.errors import BoxedAnswerMissing, CodeExecutionError, CodeExtractionError
from aoplan.plan import SubTask

from helpers import ROSTER, scripted

CODE = "```python\nprint(1.412e9 * 2 + 5e6)\n```"


def test_extract_code():
    assert extract_code("Code:\n```python\nprint(2)\n```\nmore") == "print(2)\n"
    assert extract_code("```\nx = 1\n```") == "x = 1\n"
    with pytest.raises(CodeExtractionError):
        extract_code("print(2)")


def test_subprocess_prints():
    assert SubprocessExecutor(timeout=20).run("print(6 * 7)") == "42"


def test_subprocess_timeout():
    with pytest.raises(CodeExecutionError) as exc:
        SubprocessExecutor().run("while True: pass", timeout=1)
    assert exc.value.reason == "timeout"


def test_subprocess_nonzero_exit():
    with pytest.raises(CodeExecutionError) as exc:
        SubprocessExecutor(timeout=20).run("raise SystemExit('boom')")
    assert exc.value.reason == "nonzero_exit"


def test_subprocess_network_blocked():
    code = ("import socket\ntry:\n    socket.create_connection(('127.0.0.1', 9), timeout=1)\n"
            "except OSError as e:\n    print('blocked' if 'disabled' in str(e) else 'other')\n")
    assert SubprocessExecutor(timeout=20).run(code) == "blocked"


def test_code_agent_with_stub():
    gw = scripted({"tag": "code_agent", "matcher": "Task:", "response": CODE},
                  {"tag": "code_rewrite", "matcher": "2829000000.0",
                   "response": "The combined population is 2829000000.0 people."})
    rec = CodeAgent("code_agent", gw, StubExecutor([("print", "2829000000.0")])).run(SubTask(1, "Add them.", "code_agent"), "None")
    assert rec.status == "ok" and rec.response == "The combined population is 2829000000.0 people."
    assert rec.artifacts["stdout"] == "2829000000.0" and "print" in rec.artifacts["code"]


@pytest.mark.parametrize("text, want", [
    ("so \\boxed{42}.", "42"),
    ("\\boxed{1} then \\boxed{\\frac{1}{2}}", "\\frac{1}{2}"),
])
def test_extract_boxed(text, want):
    assert extract_boxed(text) == want


@pytest.mark.parametrize("text", ["The answer is 42.", "\\boxed{\\frac{1}{2}"])
def test_extract_boxed_missing(text):
    with pytest.raises(BoxedAnswerMissing):
        extract_boxed(text)


def test_math_agent_retries_once():
    gw = scripted({"tag": "math_agent", "matcher": "End with", "response": "The answer is \\boxed{14120000}."},
                  {"tag": "math_agent", "matcher": "Question:", "response": "It is about fourteen million."})
    rec = MathAgent("math_agent", gw).run(SubTask(2, "1% of 1.412B?", "math_agent"), "None")
    assert rec.answer == "14120000" and gw.usage_report().total.calls == 2


def _search(snippets):
    client = FixtureSearchClient({"China population 2022": snippets})
    gw = scripted({"tag": "search_agent", "matcher": "Task:", "response": "China population 2022\n"},
                  {"tag": "search_rewrite", "matcher": "1.412", "response": "1.412 billion."})
    return SearchAgent("search_agent", gw, client)


def test_search_agent():
    rec = _search([Snippet("China", "Population 1.412 billion (2022)")]).run(
        SubTask(1, "Determine the population of China in 2022.", "search_agent"), "None")
    assert rec.status == "ok" and rec.response == "1.412 billion."
    assert rec.artifacts["query"] == "China population 2022"


def test_search_agent_empty_results():
    rec = _search([]).run(SubTask(1, "Determine the population of China in 2022.", "search_agent"), "None")
    assert rec.status == "failed" and rec.error == "EmptyResults"


def test_commonsense_agent():
    history = "The answer of 'Find A.' is 3."
    gw = scripted({"tag": "commonsense_agent", "matcher": f"History: {history}", "response": "Blue."})
    assert CommonsenseAgent("commonsense_agent", gw).run(SubTask(2, "Sky colour?", "commonsense_agent"), history).response == "Blue."
    empty = scripted({"matcher": "Question:", "response": "   "})
    assert CommonsenseAgent("commonsense_agent", empty).run(SubTask(1, "x", "commonsense_agent"), "None").status == "failed"


def test_build_agents():
    agents = build_agents(ROSTER, scripted(), StubExecutor([]), FixtureSearchClient())
    assert [type(agents[a.name]).__name__ for a in ROSTER] == ["CodeAgent", "MathAgent", "SearchAgent", "CommonsenseAgent"]
    sentinel = object()
    assert build_agents(ROSTER, scripted(), custom={"math_agent": sentinel}, executor=StubExecutor([]),
                        search_client=FixtureSearchClient())["math_agent"] is sentinel
