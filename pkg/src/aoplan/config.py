"""Run configuration (YAML) and component wiring."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .agents import (
    BingSearchClient,
    FixtureSearchClient,
    StubExecutor,
    SubprocessExecutor,
    build_agents,
)
from .detector import PlanDetector
from .embedding import Embedder, HashEmbedder, SentenceTransformerEmbedder
from .errors import ConfigError
from .gateway import Gateway, OpenAIChatBackend, RecordingBackend, ReplayBackend, ScriptedBackend
from .orchestrator import Orchestrator, RoutingConfig
from .plan import DEFAULT_ROSTER, AgentDescriptor, check_roster
from .planner import MetaPlanner
from .reward import RewardModel
from .templates import TemplateSet
from .works import WorksStore

logger = logging.getLogger(__name__)

MODES = ("live", "scripted", "replay")


@dataclass
class RunConfig:
    roster: tuple[AgentDescriptor, ...] = DEFAULT_ROSTER
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    mode: str = "live"
    script: Path | None = None
    replay: Path | None = None
    record: Path | None = None
    gateway: dict = field(default_factory=dict)
    params: Path | None = None
    works: Path | None = None
    traces: Path | None = None
    templates: Path | None = None
    search: dict = field(default_factory=dict)
    code: dict = field(default_factory=dict)
    embedding: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    concurrency: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        check_roster(self.roster)
        if self.mode == "scripted" and self.script is None:
            raise ConfigError("scripted mode needs a script file")
        if self.mode == "replay" and self.replay is None:
            raise ConfigError("replay mode needs a recording file")
        for name in ("script", "replay"):
            path = getattr(self, name)
            if getattr(self, "mode") in ("scripted", "replay") and path is not None and not path.exists():
                raise ConfigError(f"{name} file not found: {path}")

    def uses(self, component: str) -> bool:
        return bool(self.ablation.get(component, True))


def _path(base: Path, value) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(value).expanduser()
    return p if p.is_absolute() else base / p


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a YAML config; ``overrides`` (CLI flags) win over file values."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base = path.parent
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    roster = raw.get("roster")
    try:
        roster = tuple(AgentDescriptor(**a) for a in roster) if roster else DEFAULT_ROSTER
        routing_keys = {f.name for f in fields(RoutingConfig)}
        unknown = set(raw.get("routing") or {}) - routing_keys
        if unknown:
            raise ConfigError(f"unknown routing keys {sorted(unknown)}")
        routing = RoutingConfig(**(raw.get("routing") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    paths = raw.get("paths") or {}
    mode = raw.get("mode", "live")
    if "script" in overrides:
        mode = "scripted"
    if "replay" in overrides:
        mode = "replay"
    cwd = Path.cwd()
    return RunConfig(
        roster=roster,
        routing=routing,
        mode=overrides.get("mode", mode),
        script=_path(cwd, overrides["script"]) if "script" in overrides else _path(base, raw.get("script")),
        replay=_path(cwd, overrides["replay"]) if "replay" in overrides else _path(base, raw.get("replay")),
        record=_path(base, raw.get("record")),
        gateway=raw.get("gateway") or {},
        params=_path(cwd, overrides["params"]) if "params" in overrides else _path(base, paths.get("params")),
        works=_path(cwd, overrides["works"]) if "works" in overrides else _path(base, paths.get("works")),
        traces=_path(cwd, overrides["trace_dir"]) if "trace_dir" in overrides else _path(base, paths.get("traces")),
        templates=_path(base, paths.get("templates")),
        search={**(raw.get("search") or {}), "_base": base},
        code={**(raw.get("code") or {}), "_base": base},
        embedding=raw.get("embedding") or {},
        ablation=raw.get("ablation") or {},
        concurrency=int(raw.get("concurrency", 4)),
    )


# ---------------------------------------------------------------------------
# wiring


def make_gateway(cfg: RunConfig) -> Gateway:
    g = cfg.gateway
    if cfg.mode == "scripted":
        backend = ScriptedBackend.from_file(cfg.script)
    elif cfg.mode == "replay":
        backend = ReplayBackend(cfg.replay)
    else:
        backend = OpenAIChatBackend(api_base=g.get("api_base"), api_key=g.get("api_key"), model=g.get("model"))
        if cfg.record is not None:
            backend = RecordingBackend(backend, cfg.record)
    return Gateway(
        backend,
        retries=int(g.get("retries", 3)),
        backoff=float(g.get("backoff", 1.0)),
        temperature=float(g.get("temperature", 0.0)),
        max_tokens=int(g.get("max_tokens", 2048)),
    )


def make_embedder(cfg: RunConfig) -> Embedder:
    e = cfg.embedding
    kind = e.get("kind", "minilm" if cfg.mode == "live" else "hash")
    if kind == "hash":
        provider = HashEmbedder(seed=int(e.get("seed", 0)))
    elif kind in ("minilm", "sentence-transformers"):
        provider = SentenceTransformerEmbedder(e.get("model", "sentence-transformers/all-MiniLM-L6-v2"))
    else:
        raise ConfigError(f"unknown embedding kind {kind!r}")
    cache = Path(str(cfg.works) + ".emb.npz") if cfg.works is not None else None
    return Embedder(provider, cache)


def make_store(cfg: RunConfig, embedder: Embedder) -> WorksStore:
    threshold = cfg.embedding.get("dedup_threshold")
    if cfg.works is not None and cfg.works.exists():
        store = WorksStore.load(cfg.works, embedder, threshold)
    else:
        store = WorksStore(embedder, [], 0.95 if threshold is None else threshold)
    for a in cfg.roster:
        store.add_agent(a.name)
    return store


def make_search_client(cfg: RunConfig):
    s = cfg.search
    kind = s.get("kind", "fixture" if "fixtures" in s else "bing")
    if kind == "fixture":
        fixtures = _path(s["_base"], s.get("fixtures"))
        return FixtureSearchClient.from_file(fixtures) if fixtures else FixtureSearchClient()
    return BingSearchClient(endpoint=s.get("endpoint", "https://api.bing.microsoft.com/v7.0/search"))


def make_executor(cfg: RunConfig):
    c = cfg.code
    kind = c.get("kind", "subprocess")
    if kind == "stub":
        fixtures = _path(c["_base"], c.get("fixtures"))
        return StubExecutor.from_file(fixtures) if fixtures else StubExecutor([])
    return SubprocessExecutor(timeout=float(c.get("timeout", 10.0)))


def make_agents(cfg: RunConfig, gateway: Gateway, templates: TemplateSet):
    return build_agents(
        cfg.roster,
        gateway,
        executor=make_executor(cfg),
        search_client=make_search_client(cfg),
        templates=templates,
        code_timeout=float(cfg.code.get("timeout", 10.0)),
    )


@dataclass
class Components:
    cfg: RunConfig
    gateway: Gateway
    templates: TemplateSet
    embedder: Embedder
    planner: MetaPlanner
    store: WorksStore
    orchestrator: Orchestrator | None = None


def build_components(cfg: RunConfig, need_reward_model: bool = True) -> Components:
    gateway = make_gateway(cfg)
    templates = TemplateSet(cfg.templates)
    embedder = make_embedder(cfg)
    planner = MetaPlanner(gateway, cfg.roster, templates, cfg.routing.max_replans)
    store = make_store(cfg, embedder)
    comps = Components(cfg, gateway, templates, embedder, planner, store)
    if not need_reward_model:
        return comps
    reward_model = None
    if cfg.uses("reward_model"):
        if cfg.params is None or not cfg.params.exists():
            raise ConfigError(f"reward model params not found: {cfg.params} (train one or disable ablation.reward_model)")
        reward_model = RewardModel.load(cfg.params, embedder)
    agents = make_agents(cfg, gateway, templates)
    comps.orchestrator = Orchestrator(
        cfg.roster,
        gateway,
        planner,
        agents,
        reward_model=reward_model,
        store=store if cfg.uses("works") else None,
        detector=PlanDetector(gateway, templates) if cfg.uses("detector") else None,
        cfg=cfg.routing,
        concurrency=cfg.concurrency,
        trace_dir=cfg.traces,
        templates=templates,
    )
    return comps
