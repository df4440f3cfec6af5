"""Shared fixtures: stub models, scripted gateways and the synthetic query suite."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import yaml

from aoplan.detector import PASS_PHRASE
from aoplan.embedding import Embedder, HashEmbedder
from aoplan.gateway import Gateway, ScriptedBackend
from aoplan.plan import DEFAULT_ROSTER
from aoplan.reward import init_params

ROSTER = DEFAULT_ROSTER
NAMES = [a.name for a in ROSTER]


def hash_embedder(seed: int = 0) -> Embedder:
    return Embedder(HashEmbedder(seed=seed))


def scripted(*entries, **kw) -> Gateway:
    return Gateway(ScriptedBackend(entries), sleep=lambda s: None, **kw)


def plan_json(subtasks) -> str:
    """``subtasks``: iterable of ``(id, agent, task, deps)``."""
    return json.dumps(
        [{"task": t, "id": i, "name": a, "reason": f"{a} fits this step.", "dep": list(d)} for i, a, t, d in subtasks]
    )


class TableModel:
    """Reward-model stub reading scores from a ``{(task, agent): score}`` table."""

    def __init__(self, table: dict, default: float = 8.0):
        self.table = table
        self.default = default
        self.by_desc = {a.description: a.name for a in ROSTER}

    def score(self, task: str, agent: str) -> float:
        return float(self.table.get((task, agent), self.default))

    def predict_one(self, task: str, description: str) -> float:
        return self.score(task, self.by_desc[description])

    def predict_all(self, task: str, roster) -> list[tuple[str, float]]:
        return [(a.name, self.score(task, a.name)) for a in roster]


def constant_params(path: Path, value: float = 8.0, provider_id: str = "hash-v1:384:0") -> Path:
    """Reward model params that predict ``value`` for every input."""
    params = init_params(seed=0)
    params.weights[-1][:] = 0.0
    params.biases[-1][:] = value
    params.save(path, provider_id=provider_id)
    return path


# ---------------------------------------------------------------------------
# synthetic end-to-end suite
#
# Each sub-task: (id, agent, task, deps, payload).  payload fields per agent:
#   code:        expr (printed by the stub), stdout, sentence
#   math:        answer
#   search:      query, snippet, sentence
#   commonsense: text
# ``answer`` on a query is the synthesised final answer.

SUITE = [
    {
        "id": "china-flights",
        "question": "If 1% of the population of China flies to Indonesia on planes carrying 300 passengers, how many full flights are needed?",
        "ground_truth": "47000",
        "answer": "About 47,000 full flights are needed.",
        "subtasks": [
            (1, "search_agent", "Determine the population of China in 2022.", [],
             {"query": "population of China 2022", "snippet": "China had 1.41 billion people in 2022.",
              "sentence": "The population of China in 2022 is 1.41 billion."}),
            (2, "code_agent", "Calculate 1% of the population of China.", [1],
             {"expr": "1410000000 * 0.01", "stdout": "14100000.0", "sentence": "1% of the population is 14,100,000."}),
            (3, "code_agent", "Determine the number of full flights needed for 14,100,000 people at 300 passengers per plane.", [2],
             {"expr": "14100000 // 300", "stdout": "47000", "sentence": "47,000 full flights are needed."}),
        ],
    },
    {
        "id": "mul",
        "question": "What is 17 times 23?",
        "ground_truth": "391",
        "subtasks": [(1, "math_agent", "Compute 17 times 23.", [], {"answer": "391"})],
    },
    {
        "id": "sky",
        "question": "What colour is the sky on a clear day?",
        "ground_truth": "blue",
        "subtasks": [(1, "commonsense_agent", "Say what colour the sky is on a clear day.", [], {"text": "The sky is blue."})],
    },
    {
        "id": "towers",
        "question": "How much taller is the Eiffel Tower than the Statue of Liberty?",
        "ground_truth": "about 237 m",
        "answer": "The Eiffel Tower is about 237 m taller.",
        "subtasks": [
            (1, "search_agent", "Find the height of the Eiffel Tower.", [],
             {"query": "Eiffel Tower height", "snippet": "The Eiffel Tower is 330 m tall.",
              "sentence": "The Eiffel Tower is 330 m tall."}),
            (2, "search_agent", "Find the height of the Statue of Liberty.", [],
             {"query": "Statue of Liberty height", "snippet": "The statue is 93 m tall including its pedestal.",
              "sentence": "The Statue of Liberty is 93 m tall."}),
            (3, "math_agent", "Subtract the height of the Statue of Liberty from that of the Eiffel Tower.", [1, 2],
             {"answer": "237"}),
        ],
    },
    {
        "id": "primes",
        "question": "What is the sum of all primes below 100?",
        "ground_truth": "1060",
        "subtasks": [
            (1, "code_agent", "Sum all prime numbers below 100.", [],
             {"expr": "sum(p for p in range(2, 100) if all(p % d for d in range(2, p)))", "stdout": "1060",
              "sentence": "The sum of the primes below 100 is 1060."}),
        ],
    },
    {
        "id": "brazil-nigeria",
        "question": "A 300-seat plane flies full from Brazil to Nigeria and returns at 75% capacity. How many passengers are carried in total?",
        "ground_truth": "525",
        "answer": "525 passengers are carried in total.",
        "subtasks": [
            (1, "code_agent", "Compute the passengers carried by a full 300-seat plane.", [],
             {"expr": "300", "stdout": "300", "sentence": "A full flight carries 300 passengers."}),
            (2, "code_agent", "Compute the passengers carried by a 300-seat plane at 75% of its capacity.", [],
             {"expr": "300 * 75 // 100", "stdout": "225", "sentence": "The return flight carries 225 passengers."}),
            (3, "math_agent", "Add the passengers of the outbound and the return flight.", [1, 2], {"answer": "525"}),
        ],
    },
    {
        "id": "capital-river",
        "question": "Which river flows through the capital of France?",
        "ground_truth": "the Seine",
        "answer": "The Seine flows through Paris.",
        "subtasks": [
            (1, "search_agent", "Find the capital of France.", [],
             {"query": "capital of France", "snippet": "Paris is the capital of France.",
              "sentence": "The capital of France is Paris."}),
            (2, "commonsense_agent", "Name the river that flows through the city found before.", [1],
             {"text": "The Seine flows through Paris."}),
        ],
    },
    {
        "id": "chain-math",
        "question": "Double 21 and then add 8. What do you get?",
        "ground_truth": "50",
        "answer": "The result is 50.",
        "subtasks": [
            (1, "math_agent", "Double 21.", [], {"answer": "42"}),
            (2, "math_agent", "Add 8 to the previous result.", [1], {"answer": "50"}),
        ],
    },
    {
        "id": "week-hours",
        "question": "How many hours are there in a week, and is a week longer than 100 hours?",
        "ground_truth": "168 hours, yes",
        "answer": "A week has 168 hours, so yes, it is longer than 100 hours.",
        "subtasks": [
            (1, "commonsense_agent", "State how many days a week has.", [], {"text": "A week has 7 days."}),
            (2, "math_agent", "Multiply the number of days in a week by 24.", [1], {"answer": "168"}),
            (3, "commonsense_agent", "Say whether 100 hours is less than the hours in a week.", [2],
             {"text": "Yes, 100 hours is less than 168 hours."}),
        ],
    },
    {
        "id": "squares",
        "question": "What is the sum of the squares of 1 to 10, divided by 5?",
        "ground_truth": "77",
        "answer": "The value is 77.",
        "subtasks": [
            (1, "code_agent", "Sum the squares of the integers 1 to 10.", [],
             {"expr": "sum(i * i for i in range(1, 11))", "stdout": "385", "sentence": "The sum of squares is 385."}),
            (2, "math_agent", "Divide the sum of squares by 5.", [1], {"answer": "77"}),
        ],
    },
]


def _answer_of(sub) -> str:
    _, agent, _, _, p = sub
    text = p["answer"] if agent == "math_agent" else p.get("sentence", p.get("text"))
    return text[:-1] if text.endswith(".") else text


def _history_re(q: dict, sub) -> str:
    """Regex requiring each transitive dependency's answer inside the History section."""
    by_id = {s[0]: s for s in q["subtasks"]}
    seen, stack = set(), list(sub[3])
    while stack:
        d = stack.pop()
        if d not in seen:
            seen.add(d)
            stack.extend(by_id[d][3])
    return "".join(
        f"(?=.*History:.*The answer of '{re.escape(by_id[d][2])}' is {re.escape(_answer_of(by_id[d]))}\\.)"
        for d in sorted(seen)
    )


def suite_files(root: Path, suite=SUITE) -> dict[str, Path]:
    """Write script, fixtures, params, config and the annotated query file."""
    root.mkdir(parents=True, exist_ok=True)
    script, search, code, queries = [], [], [], []
    for q in suite:
        queries.append({"id": q["id"], "question": q["question"], "ground_truth": q["ground_truth"]})
        script.append({
            "tag": "fast_plan",
            "matcher": f"User query: {q['question']}\n",
            "response": "Here is the plan:\n" + plan_json((i, a, t, d) for i, a, t, d, _ in q["subtasks"]),
            "prompt_tokens": 300,
            "completion_tokens": 60,
        })
        for sub in q["subtasks"]:
            sid, agent, task, deps, p = sub
            hist = _history_re(q, sub)
            if agent == "code_agent":
                script.append({"tag": "code_agent", "matcher": "re:" + re.escape(f"Task: {task}\n") + hist,
                               "response": f"```python\nprint({p['expr']})\n```", "prompt_tokens": 120, "completion_tokens": 20})
                code.append({"matcher": f"print({p['expr']})", "stdout": p["stdout"]})
                script.append({"tag": "code_rewrite", "matcher": f"Question: {task}\n", "response": p["sentence"],
                               "prompt_tokens": 80, "completion_tokens": 12})
            elif agent == "math_agent":
                script.append({"tag": "math_agent", "matcher": "re:" + re.escape(f"Question: {task}\n") + hist,
                               "response": f"Working it out step by step. The answer is \\boxed{{{p['answer']}}}.",
                               "prompt_tokens": 100, "completion_tokens": 30})
            elif agent == "search_agent":
                script.append({"tag": "search_agent", "matcher": "re:" + re.escape(f"Task: {task}\n") + hist,
                               "response": p["query"], "prompt_tokens": 90, "completion_tokens": 8})
                search.append({"query": p["query"], "results": [{"title": p["query"], "snippet": p["snippet"], "url": ""}]})
                script.append({"tag": "search_rewrite", "matcher": f"Question: {task}\n", "response": p["sentence"],
                               "prompt_tokens": 110, "completion_tokens": 15})
            else:
                script.append({"tag": "commonsense_agent", "matcher": "re:" + re.escape(f"Question: {task}\n") + hist,
                               "response": p["text"], "prompt_tokens": 70, "completion_tokens": 10})
        if len(q["subtasks"]) > 1:
            script.append({"tag": "synthesize", "matcher": f"User query: {q['question']}\n", "response": q["answer"],
                           "prompt_tokens": 150, "completion_tokens": 20})
        script.append({"tag": "evaluate", "matcher": f"Question: {q['question']}\n", "response": "Yes",
                       "prompt_tokens": 200, "completion_tokens": 1})
    script.append({"tag": "detect", "matcher": "Task:", "response": PASS_PHRASE, "prompt_tokens": 250, "completion_tokens": 9})

    files = {
        "script": root / "script.jsonl",
        "search": root / "search.jsonl",
        "code": root / "code.jsonl",
        "queries": root / "queries.jsonl",
        "params": root / "params.npz",
        "config": root / "config.yaml",
    }
    for key, rows in (("script", script), ("search", search), ("code", code), ("queries", queries)):
        files[key].write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    constant_params(files["params"])
    files["config"].write_text(
        yaml.safe_dump({
            "mode": "scripted",
            "script": "script.jsonl",
            "embedding": {"kind": "hash"},
            "paths": {"params": "params.npz"},
            "search": {"kind": "fixture", "fixtures": "search.jsonl"},
            "code": {"kind": "stub", "fixtures": "code.jsonl"},
            "concurrency": 4,
        }),
        encoding="utf-8",
    )
    return files


def is_topological(order, deps: dict[int, list[int]]) -> bool:
    """Brute-force check: every node once, each after all of its deps."""
    if sorted(order) != sorted(deps):
        return False
    pos = {n: i for i, n in enumerate(order)}
    return all(pos[d] < pos[n] for n, ds in deps.items() for d in ds)


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


class TableProvider:
    """Embedding provider returning preset vectors by text."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        self.vectors = vectors
        self.dim = len(next(iter(vectors.values())))
        self.provider_id = "table"

    def encode(self, texts):
        return np.vstack([self.vectors[t] for t in texts])


def planted_dataset(n: int = 2000, dim: int = 384, n_agents: int = 4, seed: int = 0):
    """Pseudo-embeddings with a known score rule.

    Sub-task vectors sit at a controlled cosine ``c`` to one of ``n_agents``
    description vectors; the target is ``clip(round(8 * max(0, c)), 0, 8)``.
    Returns ``(X, y, e_q, e_d)`` with ``X = [e_q | e_d]``.
    """
    g = np.random.default_rng(seed)
    desc = g.standard_normal((n_agents, dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    e_d = desc[g.integers(0, n_agents, n)]
    c = g.uniform(-0.25, 1.0, n)
    u = g.standard_normal((n, dim))
    u -= (u * e_d).sum(1, keepdims=True) * e_d
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    e_q = c[:, None] * e_d + np.sqrt(1 - c**2)[:, None] * u
    cos = (e_q * e_d).sum(1) / (np.linalg.norm(e_q, axis=1) * np.linalg.norm(e_d, axis=1))
    y = np.clip(np.round(8 * np.maximum(0.0, cos)), 0, 8)
    return np.hstack([e_q, e_d]), y, e_q, e_d
