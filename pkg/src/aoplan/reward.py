"""Reward model: predicts how well an agent will resolve a sub-task.

Training data comes from running plans and judging the responses with an
LLM scorer; the regressor is a small ReLU network over the concatenated
(frozen) embeddings of the sub-task and the agent description, trained by
plain mini-batch gradient descent on a per-query weighted squared error.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .embedding import Embedder, PairEmbedder, check_text_pairs
from .errors import NumericalDivergence, ScoreParseError
from .gateway import Gateway
from .plan import AgentDescriptor, Query, answer_sentence
from .templates import DEFAULT_TEMPLATES, TemplateSet

logger = logging.getLogger(__name__)

PARAMS_VERSION = 1
HIDDEN_SIZES = (256, 64)
INPUT_DIM = 768


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class TriScore:
    correctness: int
    relevance: int
    completeness: int

    def __post_init__(self):
        for name in ("correctness", "relevance", "completeness"):
            value = getattr(self, name)
            if isinstance(value, bool) or value not in (0, 1, 2):
                raise ValueError(f"{name} must be 0, 1 or 2, got {value!r}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.correctness, self.relevance, self.completeness)


SCORE_MAP = {
    (2, 2, 2): 8,
    (2, 1, 2): 7,
    (2, 2, 1): 6,
    (2, 1, 1): 5,
    (1, 2, 2): 4,
    (1, 1, 2): 3,
    (1, 2, 1): 2,
    (1, 1, 1): 1,
}


def level_score(t: TriScore) -> int:
    return SCORE_MAP.get(t.as_tuple(), 0)


_SUMMARY = re.compile(
    r"correctness[\s*]*[:=][\s*]*([0-2])[\s*,;]*"
    r"relevance[\s*]*[:=][\s*]*([0-2])[\s*,;]*"
    r"completeness[\s*]*[:=][\s*]*([0-2])",
    re.I,
)


def parse_tri_score(text: str) -> TriScore:
    """Read the closing ``**Correctness: a, Relevance: b, Completeness: c**`` line."""
    matches = _SUMMARY.findall(text)
    if not matches:
        raise ScoreParseError("no Correctness/Relevance/Completeness summary found")
    return TriScore(*(int(v) for v in matches[-1]))


class LLMScorer:
    def __init__(self, gateway: Gateway, templates: TemplateSet = DEFAULT_TEMPLATES):
        self.gateway = gateway
        self.templates = templates

    def score(self, subtask_text: str, response_text: str) -> TriScore:
        if not subtask_text.strip() or not response_text.strip():
            raise ValueError("sub-task and response must be non-empty")
        system, user = self.templates.render("scorer", task=subtask_text, response=response_text)
        try:
            return parse_tri_score(self.gateway.chat(system, user, tag="score"))
        except ScoreParseError:
            hint = "\nEnd with the line **Correctness: score, Relevance: score, Completeness: score**."
            return parse_tri_score(self.gateway.chat(system, user + hint, tag="score"))


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class TrainingExample:
    subtask: str
    agent_description: str
    score: int
    query_id: str = ""

    def __post_init__(self):
        if not self.subtask.strip() or not self.agent_description.strip():
            raise ValueError("training texts must be non-empty")
        if not 0 <= self.score <= 8:
            raise ValueError(f"score must lie in [0, 8], got {self.score}")


def save_dataset(examples: Iterable[TrainingExample], path: str | Path) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(asdict(ex), ensure_ascii=False) + "\n")
            n += 1
    return n


def load_dataset(path: str | Path) -> list[TrainingExample]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(
                    TrainingExample(
                        subtask=rec["subtask"],
                        agent_description=rec["agent_description"],
                        score=int(rec["score"]),
                        query_id=str(rec.get("query_id", "")),
                    )
                )
    return out


def query_weights(examples: Sequence[TrainingExample]) -> np.ndarray:
    """Per-example weights making a weighted mean equal the nested average.

    Each query counts equally, each sub-task equally within its query and
    each agent equally within its sub-task.  Examples without a query id are
    treated as singleton queries.
    """
    groups: dict[str, dict[str, int]] = defaultdict(Counter)
    keys = []
    for n, ex in enumerate(examples):
        qid = ex.query_id or f"\x00{n}"
        groups[qid][ex.subtask] += 1
        keys.append((qid, ex.subtask))
    K = len(groups)
    w = np.array([1.0 / (K * len(groups[q]) * groups[q][s]) for q, s in keys])
    return w


def default_l(n_agents: int) -> int:
    return max(1, n_agents // 2)


def build_dataset(
    queries: Iterable[Query],
    roster: Sequence[AgentDescriptor],
    planner,
    run_agent: Callable[[str, str, str], str],
    scorer: LLMScorer,
    l: int | None = None,
) -> list[TrainingExample]:
    """Decompose, execute every sub-task on ``l`` suggested agents, and score.

    ``run_agent(agent_name, subtask_text, history)`` returns the response
    text.  A query that fails at any step is logged and skipped.
    """
    l = default_l(len(roster)) if l is None else l
    if not 1 <= l <= len(roster):
        raise ValueError(f"l must lie in [1, {len(roster)}]")
    by_name = {a.name: a for a in roster}
    out: list[TrainingExample] = []
    for query in queries:
        try:
            plan, suggestions = planner.suggest_plan(query, l)
            answers: dict[int, str] = {}
            rows = []
            for sid in plan.topological_order():
                sub = plan.get(sid)
                history = " ".join(
                    answer_sentence(plan.get(d).task, answers[d])
                    for d in plan.topological_order()
                    if d in plan.ancestors(sid) and d in answers
                ) or "None"
                for k, name in enumerate(suggestions[sid]):
                    response = run_agent(name, sub.task, history)
                    if k == 0:
                        answers[sid] = response
                    score = level_score(scorer.score(sub.task, response)) if response.strip() else 0
                    rows.append(TrainingExample(sub.task, by_name[name].description, score, query.id))
        except Exception as exc:
            logger.warning("skipping query %s: %s", query.id, exc)
            continue
        out.extend(rows)
    return out


# ---------------------------------------------------------------------------
# network


@dataclass
class RewardModelParams:
    """Dense layers ``768 -> 256 -> 64 -> 1``; ReLU between layers, linear output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {k}: bad shapes {W.shape} / {b.shape}")
            if k and W.shape[0] != self.weights[k - 1].shape[1]:
                raise ValueError(f"layer {k}: input width does not match previous output")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must have width 1")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    def copy(self) -> "RewardModelParams":
        return RewardModelParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def save(self, path: str | Path, **meta) -> None:
        arrays = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{k}"] = W
            arrays[f"b{k}"] = b
        header = {"version": PARAMS_VERSION, "sizes": list(self.sizes), "seed": self.seed, **meta}
        with Path(path).open("wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> tuple["RewardModelParams", dict]:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("version") != PARAMS_VERSION:
                raise ValueError(f"unsupported params version {header.get('version')}")
            n = len(header["sizes"]) - 1
            params = cls(
                [np.array(data[f"W{k}"], dtype=np.float64) for k in range(n)],
                [np.array(data[f"b{k}"], dtype=np.float64) for k in range(n)],
                int(header.get("seed", 0)),
            )
        return params, header


def init_params(sizes: Sequence[int] = (INPUT_DIM, *HIDDEN_SIZES, 1), seed: int = 0) -> RewardModelParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return RewardModelParams(weights, biases, seed)


def forward(params: RewardModelParams, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return predictions of shape (n,) and the layer inputs for backprop."""
    h = X
    inputs = []
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ W + b
        h = z if k == last else np.maximum(z, 0.0)
    return h[:, 0], inputs


def weighted_mse(pred: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> float:
    err = (y - pred) ** 2
    if w is None:
        return float(err.mean())
    return float(np.dot(w, err) / w.sum())


def loss_and_grads(
    params: RewardModelParams, X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Weighted squared error ``sum w (y - f)^2 / sum w`` and its gradients."""
    pred, inputs = forward(params, X)
    w = np.full(len(y), 1.0 / len(y)) if w is None else w / w.sum()
    resid = pred - y
    loss = float(np.dot(w, resid**2))
    g = (2.0 * w * resid)[:, None]
    gW: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(params.biases)  # type: ignore[list-item]
    for k in range(len(params.weights) - 1, -1, -1):
        gW[k] = inputs[k].T @ g
        gb[k] = g.sum(axis=0)
        if k:
            # ReLU mask from the stored post-activation input of layer k
            g = (g @ params.weights[k].T) * (inputs[k] > 0)
    return loss, gW, gb


class MLPRewardRegressor(BaseEstimator, RegressorMixin):
    """Dense ReLU regressor trained by plain mini-batch gradient descent.

    ``loss_history_[0]`` is the weighted MSE at initialisation and entry
    ``e`` the full-data weighted MSE after epoch ``e``.
    """

    def __init__(
        self,
        hidden_layer_sizes: tuple[int, ...] = HIDDEN_SIZES,
        learning_rate: float = 1e-3,
        batch_size: int = 32,
        epochs: int = 50,
        random_state: int = 0,
        shuffle: bool = True,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.shuffle = shuffle

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and learning_rate > 0 are required")
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        if w.shape != y.shape or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("sample_weight must be non-negative, one per sample, not all zero")
        self.n_features_in_ = X.shape[1]
        params = init_params((X.shape[1], *self.hidden_layer_sizes, 1), self.random_state)
        rng = np.random.default_rng(self.random_state)
        history = [self._full_loss(params, X, y, w)]
        with np.errstate(over="ignore", invalid="ignore"):
            self._train(params, X, y, w, rng, history)
        self.params_ = params
        self.loss_history_ = history
        return self

    def _train(self, params, X, y, w, rng, history) -> None:
        n = len(y)
        for _ in range(self.epochs):
            order = rng.permutation(n) if self.shuffle else np.arange(n)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                if w[idx].sum() == 0:
                    continue
                _, gW, gb = loss_and_grads(params, X[idx], y[idx], w[idx])
                for k in range(len(gW)):
                    params.weights[k] -= self.learning_rate * gW[k]
                    params.biases[k] -= self.learning_rate * gb[k]
            history.append(self._full_loss(params, X, y, w))

    @staticmethod
    def _full_loss(params, X, y, w) -> float:
        pred, _ = forward(params, X)
        loss = weighted_mse(pred, y, w)
        if not np.isfinite(loss):
            raise NumericalDivergence("training loss became non-finite")
        return loss

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return forward(self.params_, X)[0]

    @classmethod
    def from_params(cls, params: RewardModelParams, **kw) -> "MLPRewardRegressor":
        est = cls(hidden_layer_sizes=params.sizes[1:-1], random_state=params.seed, **kw)
        est.params_ = params
        est.n_features_in_ = params.sizes[0]
        est.loss_history_ = []
        return est


# ---------------------------------------------------------------------------
# reward model = frozen embeddings + regressor


class RewardModel(BaseEstimator, RegressorMixin):
    """Estimator over (sub-task, agent description) text pairs.

    ``fit``/``predict`` take sequences of string pairs; ``predict_one`` and
    ``predict_all`` are the routing-facing conveniences.
    """

    def __init__(
        self,
        embedder: Embedder | None = None,
        hidden_layer_sizes: tuple[int, ...] = HIDDEN_SIZES,
        learning_rate: float = 1e-3,
        batch_size: int = 32,
        epochs: int = 50,
        random_state: int = 0,
    ):
        self.embedder = embedder
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _features(self, X) -> np.ndarray:
        return PairEmbedder(self.embedder).transform(X)

    def fit(self, X, y, sample_weight=None):
        pairs = check_text_pairs(X)
        self.regressor_ = MLPRewardRegressor(
            hidden_layer_sizes=self.hidden_layer_sizes,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            random_state=self.random_state,
        ).fit(self._features(pairs), y, sample_weight=sample_weight)
        return self

    def fit_examples(self, examples: Sequence[TrainingExample]) -> "RewardModel":
        """Fit on a scored dataset with the nested per-query weighting."""
        if not examples:
            raise ValueError("empty training set")
        X = [(e.subtask, e.agent_description) for e in examples]
        y = np.array([e.score for e in examples], dtype=np.float64)
        return self.fit(X, y, sample_weight=query_weights(examples))

    @property
    def params_(self) -> RewardModelParams:
        check_is_fitted(self, "regressor_")
        return self.regressor_.params_

    @property
    def loss_history_(self) -> list[float]:
        check_is_fitted(self, "regressor_")
        return self.regressor_.loss_history_

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "regressor_")
        return self.regressor_.predict(self._features(X))

    def predict_one(self, subtask: str, description: str) -> float:
        return float(self.predict([(subtask, description)])[0])

    def predict_all(self, subtask: str, roster: Sequence[AgentDescriptor]) -> list[tuple[str, float]]:
        scores = self.predict([(subtask, a.description) for a in roster])
        return [(a.name, float(s)) for a, s in zip(roster, scores)]

    @classmethod
    def from_params(cls, params: RewardModelParams, embedder: Embedder | None = None) -> "RewardModel":
        model = cls(embedder=embedder, hidden_layer_sizes=params.sizes[1:-1], random_state=params.seed)
        model.regressor_ = MLPRewardRegressor.from_params(params)
        return model

    def save(self, path: str | Path) -> None:
        provider = self.embedder.provider_id if self.embedder is not None else None
        self.params_.save(path, provider_id=provider)

    @classmethod
    def load(cls, path: str | Path, embedder: Embedder | None = None) -> "RewardModel":
        params, header = RewardModelParams.load(path)
        if embedder is not None and header.get("provider_id") not in (None, embedder.provider_id):
            logger.warning(
                "params were trained with embeddings %s but %s is active",
                header.get("provider_id"),
                embedder.provider_id,
            )
        return cls.from_params(params, embedder)


def write_loss_csv(history: Sequence[float], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mse"])
        for epoch, loss in enumerate(history):
            writer.writerow([epoch, repr(float(loss))])


def train(
    examples: Sequence[TrainingExample],
    embedder: Embedder | None = None,
    *,
    epochs: int = 50,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> tuple[RewardModel, list[float]]:
    model = RewardModel(
        embedder=embedder,
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        random_state=seed,
    ).fit_examples(examples)
    return model, model.loss_history_
