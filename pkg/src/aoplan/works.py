"""Per-agent representative works and max-cosine similarity lookup."""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import Embedder
from .errors import StoreCorrupt, UnknownAgent
from .plan import AgentDescriptor, Plan

logger = logging.getLogger(__name__)

STORE_VERSION = 1
NO_WORKS = -math.inf
SOURCES = ("training_init", "feedback")


@dataclass
class RepresentativeWork:
    agent_name: str
    task_text: str
    embedding: np.ndarray | None
    source: str = "feedback"
    added_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def __eq__(self, other) -> bool:
        if not isinstance(other, RepresentativeWork):
            return NotImplemented
        same_vec = (self.embedding is None and other.embedding is None) or (
            self.embedding is not None
            and other.embedding is not None
            and np.array_equal(self.embedding, other.embedding)
        )
        return (
            self.agent_name == other.agent_name
            and self.task_text == other.task_text
            and self.source == other.source
            and self.added_at == other.added_at
            and same_vec
        )


@dataclass(frozen=True)
class AgentSimilarity:
    agent_name: str
    work: str | None
    sim: float

    @property
    def has_works(self) -> bool:
        return self.work is not None


@dataclass(frozen=True)
class SimilarityReport:
    per_agent: tuple[AgentSimilarity, ...]
    global_best: AgentSimilarity


def cosine_max(query: np.ndarray, mat: np.ndarray) -> tuple[int, float]:
    """Index and value of the largest cosine between ``query`` and rows of ``mat``."""
    norms = np.linalg.norm(mat, axis=1) * np.linalg.norm(query)
    sims = np.clip((mat @ query) / np.where(norms == 0, 1.0, norms), -1.0, 1.0)
    k = int(np.argmax(sims))
    return k, float(sims[k])


class WorksStore:
    """Representative works for each agent of a roster.

    Reads work on a snapshot taken under the lock, mutations are serialised.
    """

    def __init__(self, embedder: Embedder, agents: Iterable[str] = (), dedup_threshold: float = 0.95):
        self.embedder = embedder
        self.dedup_threshold = dedup_threshold
        self._works: dict[str, list[RepresentativeWork]] = {name: [] for name in agents}
        self._lock = threading.RLock()

    # -- queries -----------------------------------------------------------

    @property
    def agents(self) -> list[str]:
        with self._lock:
            return list(self._works)

    def works(self, agent_name: str) -> list[RepresentativeWork]:
        with self._lock:
            if agent_name not in self._works:
                raise UnknownAgent(agent_name)
            self._ensure_embedded(agent_name)
            return list(self._works[agent_name])

    def __len__(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._works.values())

    def _ensure_embedded(self, agent_name: str) -> None:
        stale = [w for w in self._works[agent_name] if w.embedding is None]
        if stale:
            vecs = self.embedder.embed_many([w.task_text for w in stale])
            for w, v in zip(stale, vecs):
                w.embedding = v

    def _matrix(self, agent_name: str) -> tuple[list[RepresentativeWork], np.ndarray | None]:
        works = self.works(agent_name)
        if not works:
            return works, None
        return works, np.vstack([w.embedding for w in works])

    def similarity(self, subtask_text: str, agent_name: str) -> float:
        """Max cosine against the agent's works; ``-inf`` when it has none."""
        return self._best(self.embedder.embed(subtask_text), agent_name).sim

    def _best(self, vec: np.ndarray, agent_name: str) -> AgentSimilarity:
        works, mat = self._matrix(agent_name)
        if mat is None:
            return AgentSimilarity(agent_name, None, NO_WORKS)
        k, sim = cosine_max(vec, mat)
        return AgentSimilarity(agent_name, works[k].task_text, sim)

    def best_match(self, subtask_text: str, roster: Sequence[AgentDescriptor | str]) -> SimilarityReport:
        if not roster:
            raise ValueError("roster must be non-empty")
        names = [a if isinstance(a, str) else a.name for a in roster]
        vec = self.embedder.embed(subtask_text)
        with self._lock:
            per_agent = tuple(
                self._best(vec, n) if n in self._works else AgentSimilarity(n, None, NO_WORKS) for n in names
            )
        best = per_agent[0]
        for entry in per_agent[1:]:
            if entry.sim > best.sim:  # strict: earlier roster entry wins ties
                best = entry
        return SimilarityReport(per_agent, best)

    # -- mutations ---------------------------------------------------------

    def add_agent(self, agent_name: str) -> None:
        with self._lock:
            self._works.setdefault(agent_name, [])

    def _add_if_new(self, agent_name: str, text: str, source: str) -> bool:
        if agent_name not in self._works:
            raise UnknownAgent(agent_name)
        # identical text is always a duplicate, whatever rounding does to its cosine
        if any(w.task_text == text for w in self._works[agent_name]):
            return False
        vec = self.embedder.embed(text)
        if self._best(vec, agent_name).sim >= self.dedup_threshold:
            return False
        self._works[agent_name].append(RepresentativeWork(agent_name, text, vec, source))
        return True

    def init_from_training(self, dataset, roster: Sequence[AgentDescriptor], accept_threshold: float = 7) -> int:
        """Seed works from scored training rows at or above ``accept_threshold``."""
        by_description = {a.description: a.name for a in roster}
        accepted = [ex for ex in dataset if ex.score >= accept_threshold]
        for ex in accepted:
            if ex.agent_description not in by_description:
                raise UnknownAgent(f"no roster agent has description {ex.agent_description!r}")
        added = 0
        with self._lock:
            for ex in accepted:
                name = by_description[ex.agent_description]
                self._works.setdefault(name, [])
                added += self._add_if_new(name, ex.subtask, "training_init")
        return added

    def record_success(self, plan: Plan, records) -> int:
        """Feed the sub-tasks of a completely resolved query back into the store.

        ``records`` are execution records; each executed sub-task goes to the
        agent that actually ran it, unless it is too similar to an existing work.
        """
        tasks = {s.id: s.task for s in plan}
        added = 0
        with self._lock:
            for rec in records:
                if rec.subtask_id in tasks and rec.status == "ok":
                    added += self._add_if_new(rec.agent_name, tasks[rec.subtask_id], "feedback")
        return added

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with self._lock:
            for name in self._works:
                self._ensure_embedded(name)
            header = {
                "version": STORE_VERSION,
                "provider_id": self.embedder.provider_id,
                "dims": self.embedder.dim,
                "agents": list(self._works),
                "dedup_threshold": self.dedup_threshold,
                "count": sum(len(v) for v in self._works.values()),
            }
            lines = [json.dumps(header)]
            for works in self._works.values():
                for w in works:
                    lines.append(
                        json.dumps(
                            {
                                "agent_name": w.agent_name,
                                "task_text": w.task_text,
                                "embedding": [float(x) for x in w.embedding],
                                "source": w.source,
                                "added_at": w.added_at,
                            }
                        )
                    )
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path, embedder: Embedder, dedup_threshold: float | None = None) -> "WorksStore":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if not text.endswith("\n"):
            raise StoreCorrupt("file is truncated (no trailing newline)", len(lines) - 2)
        lines = lines[:-1]
        try:
            header = json.loads(lines[0])
            if header.get("version") != STORE_VERSION:
                raise StoreCorrupt(f"unsupported store version {header.get('version')}", None)
        except (json.JSONDecodeError, IndexError, AttributeError) as exc:
            raise StoreCorrupt(f"bad header: {exc}") from None
        threshold = dedup_threshold if dedup_threshold is not None else header.get("dedup_threshold", 0.95)
        store = cls(embedder, header.get("agents", []), threshold)
        same_provider = header.get("provider_id") == embedder.provider_id
        if not same_provider:
            logger.warning(
                "works store %s was embedded with %s; re-embedding lazily with %s",
                path,
                header.get("provider_id"),
                embedder.provider_id,
            )
        for index, line in enumerate(lines[1:]):
            try:
                rec = json.loads(line)
                vec = np.asarray(rec["embedding"], dtype=np.float64)
                if same_provider and (vec.shape != (header["dims"],) or not np.all(np.isfinite(vec))):
                    raise ValueError("embedding has wrong size or non-finite values")
                if rec["source"] not in SOURCES:
                    raise ValueError(f"unknown source {rec['source']!r}")
                work = RepresentativeWork(
                    rec["agent_name"], rec["task_text"], vec if same_provider else None, rec["source"], rec["added_at"]
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise StoreCorrupt(str(exc), index) from None
            store._works.setdefault(work.agent_name, []).append(work)
        if "count" in header and header["count"] != len(lines) - 1:
            raise StoreCorrupt(f"expected {header['count']} records, found {len(lines) - 1}", len(lines) - 1)
        return store

    def stats(self) -> dict[str, dict]:
        """Per-agent work count and mean pairwise cosine (``None`` below two works)."""
        out = {}
        for name in self.agents:
            works, mat = self._matrix(name)
            mean = None
            if len(works) >= 2:
                unit = mat / np.linalg.norm(mat, axis=1, keepdims=True)
                sims = unit @ unit.T
                iu = np.triu_indices(len(works), k=1)
                mean = float(sims[iu].mean())
            out[name] = {"count": len(works), "mean_pairwise_similarity": mean}
        return out
