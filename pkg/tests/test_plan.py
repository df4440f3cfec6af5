import itertools

import pytest
from hypothesis import given, strategies as st

from aoplan.errors import PlanParseError, PlanValidationError, SpliceError
from aoplan.plan import (
    AgentDescriptor,
    Plan,
    SubTask,
    candidate_agents,
    check_roster,
    extract_json_array,
    parse_plan,
    render_roster,
    serialize_plan,
    splice,
    validate_plan,
)

from helpers import NAMES, ROSTER, is_topological, plan_json

A1 = plan_json([
    (1, "search_agent", "Determine the population of China.", []),
    (2, "math_agent", "Calculate 1% of the population of China.", [1]),
    (3, "math_agent", "Determine the number of full flights needed.", [2]),
])


def test_a1_plan():
    plan = parse_plan(A1, ROSTER, "q")
    assert [s.agent_name for s in plan] == ["search_agent", "math_agent", "math_agent"]
    assert [s.deps for s in plan] == [(), (1,), (2,)]
    assert plan.topological_order() == [1, 2, 3]


def test_fenced_equals_unfenced():
    fenced = "Sure, here it is:\n```json\n" + A1 + "\n```\nGood luck."
    assert parse_plan(fenced, ROSTER, "q") == parse_plan(A1, ROSTER, "q")


@pytest.mark.parametrize(
    "raw, kind",
    [
        (plan_json([(1, "ghost_agent", "t", [])]), "unknown_agent"),
        (plan_json([(1, "math_agent", "a", [2]), (2, "math_agent", "b", [1])]), "cycle"),
        (plan_json([(1, "math_agent", "a", []), (2, "math_agent", "b", []), (2, "math_agent", "c", [])]), "duplicate_id"),
        (plan_json([(1, "math_agent", "a", [1])]), "self_dep"),
        (plan_json([(1, "math_agent", "a", [7])]), "missing_dep"),
        ("[]", "empty"),
    ],
)
def test_invalid_plans(raw, kind):
    with pytest.raises(PlanValidationError) as exc:
        parse_plan(raw, ROSTER, "q")
    assert exc.value.kind == kind


@pytest.mark.parametrize("raw", ["no json here", '[{"task": "t", "id": 1}]', '{"task": "t"}'])
def test_unparseable(raw):
    with pytest.raises(PlanParseError):
        parse_plan(raw, ROSTER, "q")


def test_extract_skips_other_brackets():
    assert extract_json_array('see [1] below: [{"a": 1}]') == [{"a": 1}]
    assert extract_json_array('[oops] then []') == []


def test_name_list_and_candidates():
    raw = '[{"task": "t", "id": 1, "name": ["math_agent", "code_agent"], "reason": "r", "dep": []}]'
    plan = parse_plan(raw, ROSTER, "q")
    assert plan.get(1).agent_name == "math_agent"
    assert candidate_agents(raw) == {1: ["math_agent", "code_agent"]}


def test_roster_rendering_and_checks():
    assert render_roster(ROSTER[:1]).startswith("[code_agent: Generate code")
    with pytest.raises(ValueError):
        check_roster([ROSTER[0], ROSTER[0]])
    with pytest.raises(ValueError):
        AgentDescriptor("x", "d", "wizard")


def test_ancestors_and_successors():
    plan = parse_plan(A1, ROSTER, "q")
    assert plan.ancestors(3) == {1, 2}
    assert plan.successors(1) == [2]


# -- splice ------------------------------------------------------------------


def _ancestors(deps, node):
    seen, stack = set(), list(deps[node])
    while stack:
        d = stack.pop()
        if d not in seen:
            seen.add(d)
            stack.extend(deps[d])
    return seen


def _small_dags(max_n=4):
    for n in range(1, max_n + 1):
        edges = [(i, j) for j in range(1, n + 1) for i in range(1, j)]
        for mask in range(1 << len(edges)):
            deps = {k: [] for k in range(1, n + 1)}
            for bit, (i, j) in enumerate(edges):
                if mask >> bit & 1:
                    deps[j].append(i)
            yield deps


def _plan(deps):
    return Plan("q", tuple(SubTask(k, f"task {k}", "math_agent", deps=tuple(d)) for k, d in deps.items()))


BLOCKS = {
    "one": [SubTask(1, "n1", "code_agent")],
    "chain2": [SubTask(1, "n1", "code_agent"), SubTask(2, "n2", "math_agent")],
    "chain3": [SubTask(5, "n1", "code_agent"), SubTask(6, "n2", "code_agent"), SubTask(7, "n3", "math_agent")],
    "diamond": [
        SubTask(1, "n1", "search_agent"),
        SubTask(2, "n2", "search_agent"),
        SubTask(3, "n3", "math_agent", deps=(1, 2)),
    ],
    "fork": [SubTask(1, "n1", "search_agent"), SubTask(2, "n2", "math_agent", deps=(1,)), SubTask(3, "n3", "math_agent", deps=(1,))],
}


def test_splice_against_brute_force_oracle():
    """Over every DAG with up to 4 nodes, every target and several blocks.

    Oracle: the result is acyclic (checked by a brute-force topological
    validator); the ancestor relation among surviving nodes is unchanged;
    every original ancestor of the target is an ancestor of every new node;
    every survivor that depended on the target depends on every sink of the
    block; and the new nodes keep the block's internal order.
    """
    cases = 0
    for deps in _small_dags():
        plan = _plan(deps)
        for target, (name, block) in itertools.product(list(deps), BLOCKS.items()):
            out = splice(plan, target, block, ROSTER)
            new_deps = {s.id: list(s.deps) for s in out}
            assert is_topological(out.topological_order(), new_deps)
            survivors = [k for k in deps if k != target]
            new_ids = [s.id for s in out if s.id not in deps]
            assert len(new_ids) == len(block) and min(new_ids) == max(deps) + 1
            for k in survivors:
                old = _ancestors(deps, k) - {target}
                assert _ancestors(new_deps, k) & set(survivors) == old
                if target in _ancestors(deps, k):
                    sinks = [n for n in new_ids if not any(n in new_deps[m] for m in new_ids)]
                    assert set(sinks) <= _ancestors(new_deps, k)
            for n in new_ids:
                assert _ancestors(deps, target) <= _ancestors(new_deps, n)
            if name.startswith("chain"):
                for a, b in zip(new_ids, new_ids[1:]):
                    assert new_deps[b] == [a]
            cases += 1
    assert cases == sum(len(d) for d in _small_dags()) * len(BLOCKS)


def test_splice_example():
    plan = _plan({1: [], 2: [1], 3: [2]})
    out = splice(plan, 2, BLOCKS["chain2"], ROSTER)
    assert [(s.id, s.deps) for s in out] == [(1, ()), (4, (1,)), (5, (4,)), (3, (5,))]


def test_splice_single_in_place():
    out = splice(_plan({1: [], 2: [1]}), 1, BLOCKS["one"], ROSTER)
    assert [(s.id, s.task, s.deps) for s in out] == [(3, "n1", ()), (2, "task 2", (3,))]


def test_splice_cycle_through_consumer():
    plan = _plan({1: [], 2: [1], 3: [2]})
    with pytest.raises(SpliceError):
        splice(plan, 2, [SubTask(1, "n1", "math_agent", deps=(3,))], ROSTER)


def test_splice_rejects_dep_on_replaced():
    with pytest.raises(SpliceError):
        splice(_plan({1: [], 2: [1]}), 2, [SubTask(9, "n", "math_agent", deps=(2,))], ROSTER)
    with pytest.raises(SpliceError):
        splice(_plan({1: []}), 1, [], ROSTER)


# -- round trip --------------------------------------------------------------

# the parser strips surrounding whitespace, so generate already-stripped text
task_text = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=30).filter(
    lambda t: t.strip() == t and t
)


@st.composite
def plans(draw):
    n = draw(st.integers(1, 6))
    ids = draw(st.permutations(range(1, 20)))[:n]
    subtasks = []
    for k, sid in enumerate(ids):
        deps = draw(st.lists(st.sampled_from(ids[:k]), unique=True)) if k else []
        subtasks.append(SubTask(sid, draw(task_text), draw(st.sampled_from(NAMES)), draw(st.text(max_size=20)), tuple(deps)))
    return Plan("q", tuple(subtasks))


@given(plans())
def test_serialize_round_trip(plan):
    validate_plan(plan, ROSTER)
    assert parse_plan(serialize_plan(plan), ROSTER, "q") == plan
