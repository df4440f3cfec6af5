"""Text embedding providers, a content-hash cache, and a pair transformer.

The reward model and the representative-works store must see the same
embedding function, so both receive one :class:`Embedder`.
"""

from __future__ import annotations

import hashlib
import logging
import re
import threading
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import EmbeddingUnavailable

logger = logging.getLogger(__name__)

EMBED_DIM = 384

_TOKEN = re.compile(r"\w+")


class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int

    def encode(self, texts: Sequence[str]) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic pseudo-embedding for tests and offline runs.

    Each unigram and bigram is hashed to a seeded Gaussian direction; a text
    is the unit-normalised sum of its features, so texts sharing words have
    positive cosine similarity.  No model download is needed.
    """

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.provider_id = f"hash-v1:{dim}:{seed}"
        self._features: dict[str, np.ndarray] = {}

    def _direction(self, feature: str) -> np.ndarray:
        vec = self._features.get(feature)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}\x00{feature}".encode(), digest_size=8).digest()
            vec = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.dim)
            self._features[feature] = vec
        return vec

    def _one(self, text: str) -> np.ndarray:
        tokens = _TOKEN.findall(text.lower())
        features = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
        if not features:
            features = ["\x01" + text]
        vec = np.sum([self._direction(f) for f in features], axis=0)
        return vec / np.linalg.norm(vec)

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        return np.vstack([self._one(t) for t in texts]) if texts else np.zeros((0, self.dim))


class SentenceTransformerEmbedder:
    """Adapter for a sentence-transformers model (default all-MiniLM-L6-v2)."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2", device: str = "cpu"):
        self.model_name = model_name
        self.device = device
        self.provider_id = f"st:{model_name}"
        self.dim = EMBED_DIM
        self._model = None
        self._lock = threading.Lock()

    def _load(self):
        with self._lock:
            if self._model is None:
                try:
                    from sentence_transformers import SentenceTransformer

                    self._model = SentenceTransformer(self.model_name, device=self.device)
                except Exception as exc:  # import error, download failure, bad weights
                    raise EmbeddingUnavailable(f"cannot load {self.model_name}: {exc}") from exc
                self.dim = int(self._model.get_sentence_embedding_dimension())
        return self._model

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        model = self._load()
        try:
            out = model.encode(list(texts), convert_to_numpy=True, show_progress_bar=False)
        except Exception as exc:
            raise EmbeddingUnavailable(str(exc)) from exc
        return np.asarray(out, dtype=np.float64)


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Embedder:
    """Caching front for a provider; identical text yields identical vectors."""

    def __init__(self, provider: EmbeddingProvider | None = None, cache_path: str | Path | None = None):
        self.provider = provider if provider is not None else HashEmbedder()
        self.cache_path = Path(cache_path) if cache_path else None
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.cache_path is not None and self.cache_path.exists():
            self._load_cache()

    @property
    def provider_id(self) -> str:
        return self.provider.provider_id

    @property
    def dim(self) -> int:
        return self.provider.dim

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        for t in texts:
            if not isinstance(t, str) or not t.strip():
                raise ValueError("cannot embed empty text")
        keys = [text_key(t) for t in texts]
        with self._lock:
            missing = {k: t for k, t in zip(keys, texts) if k not in self._cache}
        if missing:
            vectors = np.asarray(self.provider.encode(list(missing.values())), dtype=np.float64)
            if not np.all(np.isfinite(vectors)):
                raise EmbeddingUnavailable("provider returned non-finite components")
            with self._lock:
                for k, v in zip(missing, vectors):
                    v = v.copy()
                    v.flags.writeable = False
                    self._cache.setdefault(k, v)
        with self._lock:
            out = np.vstack([self._cache[k] for k in keys]) if keys else np.zeros((0, self.dim))
        return out

    def save_cache(self, path: str | Path | None = None) -> None:
        path = Path(path) if path else self.cache_path
        if path is None:
            return
        with self._lock:
            keys = list(self._cache)
            mat = np.vstack([self._cache[k] for k in keys]) if keys else np.zeros((0, self.dim))
        with path.open("wb") as fh:
            np.savez(fh, provider_id=np.array(self.provider_id), keys=np.array(keys), vectors=mat)

    def _load_cache(self) -> None:
        try:
            with np.load(self.cache_path, allow_pickle=False) as data:
                if str(data["provider_id"]) != self.provider_id:
                    logger.warning("embedding cache %s belongs to another provider; ignoring", self.cache_path)
                    return
                for k, v in zip(data["keys"], data["vectors"]):
                    v = np.array(v, dtype=np.float64)
                    v.flags.writeable = False
                    self._cache[str(k)] = v
        except (OSError, ValueError, KeyError) as exc:
            logger.warning("unreadable embedding cache %s (%s); starting empty", self.cache_path, exc)


def check_text_pairs(X) -> list[tuple[str, str]]:
    """Validate a sequence of (sub-task, agent description) string pairs."""
    if isinstance(X, np.ndarray):
        X = X.tolist()
    pairs = []
    for i, row in enumerate(X):
        if len(row) != 2:
            raise ValueError(f"row {i}: expected a (subtask, description) pair")
        a, b = row
        if not isinstance(a, str) or not isinstance(b, str) or not a.strip() or not b.strip():
            raise ValueError(f"row {i}: both texts must be non-empty strings")
        pairs.append((a, b))
    if not pairs:
        raise ValueError("no samples")
    return pairs


class PairEmbedder(BaseEstimator, TransformerMixin):
    """Stateless transformer: (sub-task, description) pairs -> concatenated embeddings.

    The sub-task embedding comes first, the description second.
    """

    def __init__(self, embedder: Embedder | None = None):
        self.embedder = embedder

    def fit(self, X, y=None):
        check_text_pairs(X)
        return self

    def transform(self, X) -> np.ndarray:
        pairs = check_text_pairs(X)
        embedder = self.embedder if self.embedder is not None else _default_embedder()
        left = embedder.embed_many([p[0] for p in pairs])
        right = embedder.embed_many([p[1] for p in pairs])
        return np.hstack([left, right])


_DEFAULT: Embedder | None = None


def _default_embedder() -> Embedder:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Embedder()
    return _DEFAULT
