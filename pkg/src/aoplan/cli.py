"""Command-line entry point: ``aoplan {run,build-dataset,train,eval,works}``.

Exit codes: 0 success, 1 hard failure, 2 best-effort result after a
budget ran out.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

from .config import RunConfig, build_components, load_config, make_agents, make_embedder
from .embedding import Embedder
from .errors import AOPError, ConfigError, NumericalDivergence, StoreCorrupt
from .plan import Query, SubTask
from .reward import (
    LLMScorer,
    build_dataset,
    default_l,
    load_dataset,
    save_dataset,
    train,
    write_loss_csv,
)

logger = logging.getLogger("aoplan")

EXIT_OK, EXIT_FAIL, EXIT_BUDGET = 0, 1, 2


def read_queries(path: str | Path) -> list[tuple[Query, str | None]]:
    """JSON-lines ``{question, ground_truth?, id?}`` or one plain query per line."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("{"):
            rec = json.loads(line)
            text = rec.get("question") or rec.get("query") or rec.get("text")
            qid = str(rec.get("id", f"q{len(out)}"))
            out.append((Query(qid, text), rec.get("ground_truth")))
        else:
            out.append((Query(f"q{len(out)}", line), None))
    return out


def _overrides(args) -> dict:
    return {
        "script": getattr(args, "script", None),
        "replay": getattr(args, "replay", None),
        "trace_dir": getattr(args, "trace_dir", None),
        "params": getattr(args, "params", None),
        "works": getattr(args, "works", None),
    }


def _err(stage: str, exc: BaseException) -> None:
    print(f"error [{stage}]: {type(exc).__name__}: {exc}", file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, _overrides(args))
        comps = build_components(cfg)
    except (AOPError, OSError, ValueError) as exc:
        _err("config", exc)
        return EXIT_FAIL
    if args.file:
        queries = [q for q, _ in read_queries(args.file)]
    elif args.query:
        queries = [Query("q0", args.query)]
    else:
        _err("input", ValueError("give a query or --file"))
        return EXIT_FAIL
    code = EXIT_OK
    for query in queries:
        answer, trace = comps.orchestrator.answer_query(query)
        for e in trace.errors:
            print(f"error [{e['stage']}]: {e['type']}: {e['message']}", file=sys.stderr)
        if trace.status == "failed":
            code = EXIT_FAIL
        elif trace.status == "budget_exhausted" and code == EXIT_OK:
            code = EXIT_BUDGET
        print(answer)
    if cfg.works is not None:
        comps.store.save(cfg.works)
        comps.embedder.save_cache()
    return code


def cmd_build_dataset(args) -> int:
    try:
        cfg = load_config(args.config, _overrides(args))
        comps = build_components(cfg, need_reward_model=False)
        queries = [q for q, _ in read_queries(args.queries)]
    except (AOPError, OSError, ValueError) as exc:
        _err("config", exc)
        return EXIT_FAIL
    agents = make_agents(cfg, comps.gateway, comps.templates)
    l = args.l if args.l is not None else default_l(len(cfg.roster))

    def run_agent(name: str, task: str, history: str) -> str:
        rec = agents[name].run(SubTask(1, task, name), history)
        return rec.response if rec.status == "ok" else ""

    try:
        examples = build_dataset(queries, cfg.roster, comps.planner, run_agent, LLMScorer(comps.gateway, comps.templates), l)
        save_dataset(examples, args.out)
    except (OSError, ValueError) as exc:
        _err("build-dataset", exc)
        return EXIT_FAIL
    names = {a.description: a.name for a in cfg.roster}
    per_agent = Counter(names.get(e.agent_description, "?") for e in examples)
    hist = Counter(e.score for e in examples)
    print(f"examples: {len(examples)} (l={l})")
    for a in cfg.roster:
        print(f"  {a.name}: {per_agent.get(a.name, 0)}")
    print("score histogram: " + " ".join(f"{s}:{hist.get(s, 0)}" for s in range(9)))
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        examples = load_dataset(args.dataset)
    except (OSError, ValueError, KeyError) as exc:
        _err("dataset", exc)
        return EXIT_FAIL
    if not examples:
        _err("dataset", ValueError(f"{args.dataset} holds no examples"))
        return EXIT_FAIL
    try:
        cfg = load_config(args.config, _overrides(args)) if args.config else None
        embedder = _embedder_for(cfg, args)
        model, history = train(
            examples, embedder, epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr, seed=args.seed
        )
        model.save(args.params)
        write_loss_csv(history, args.loss_csv or Path(str(args.params) + ".loss.csv"))
    except NumericalDivergence as exc:
        _err("train", exc)
        return EXIT_FAIL
    except (AOPError, OSError, ValueError) as exc:
        _err("train", exc)
        return EXIT_FAIL
    print(f"epoch 0 mse: {history[0]:.6f}")
    print(f"epoch {len(history) - 1} mse: {history[-1]:.6f}")
    return EXIT_OK


def _embedder_for(cfg, args) -> Embedder:
    if cfg is None:
        cfg = RunConfig()
    if args.embedding:
        cfg.embedding = {**cfg.embedding, "kind": args.embedding}
    return make_embedder(cfg)


def run_eval(orchestrator, items, clock=time.monotonic) -> dict:
    """Answer and judge every ``(query, ground_truth)``; accuracy plus cost.

    Token counts, calls and ``llm_time_s`` come straight from the gateway
    ledger, which is reset first so the report covers this run only.
    """
    gateway = orchestrator.gateway
    gateway.reset_usage()
    start = clock()
    correct = 0
    rows = []
    for query, truth in items:
        if truth is None:
            logger.warning("query %s has no ground truth; counted as incorrect", query.id)
            rows.append({"id": query.id, "correct": False, "status": "no_ground_truth"})
            continue
        _, trace = orchestrator.answer_query(query, ground_truth=truth)
        ok = bool(trace.correct)
        if trace.errors:
            logger.warning("query %s: %s", query.id, trace.errors)
        correct += ok
        rows.append({"id": query.id, "correct": ok, "status": trace.status})
    usage = gateway.usage_report()
    total = usage.total
    n = len(items)
    return {
        "queries": n,
        "correct": correct,
        "accuracy": 100.0 * correct / n if n else 0.0,
        "prompt_tokens": total.prompt_tokens,
        "completion_tokens": total.completion_tokens,
        "calls": total.calls,
        "llm_time_s": total.wall_time,
        "elapsed_s": clock() - start,
        "by_tag": usage.to_dict(),
        "per_query": rows,
    }


def format_report(report: dict) -> str:
    p, c = report["prompt_tokens"], report["completion_tokens"]
    return "\n".join(
        [
            f"accuracy: {report['accuracy']:.1f}% ({report['correct']}/{report['queries']})",
            f"prompt tokens: {p} ({p / 1e6:.2f}M)",
            f"completion tokens: {c} ({c / 1e6:.2f}M)",
            f"calls: {report['calls']}",
            f"llm time (s): {report['llm_time_s']:.1f}",
            f"elapsed (s): {report['elapsed_s']:.1f}",
        ]
    )


def cmd_eval(args) -> int:
    try:
        cfg = load_config(args.config, _overrides(args))
        comps = build_components(cfg)
        items = read_queries(args.queries)
    except (AOPError, OSError, ValueError) as exc:
        _err("config", exc)
        return EXIT_FAIL
    report = run_eval(comps.orchestrator, items)
    print(format_report(report))
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if cfg.works is not None:
        comps.store.save(cfg.works)
    return EXIT_OK


def cmd_works(args) -> int:
    try:
        cfg = load_config(args.config, _overrides(args))
        if cfg.works is None:
            raise ConfigError("no works store path (use --works or paths.works)")
        comps = build_components(cfg, need_reward_model=False)
    except StoreCorrupt as exc:
        _err("works", exc)
        return EXIT_FAIL
    except (AOPError, OSError, ValueError) as exc:
        _err("config", exc)
        return EXIT_FAIL
    store = comps.store
    if args.action == "import":
        if not args.dataset:
            _err("works", ValueError("import needs --dataset"))
            return EXIT_FAIL
        try:
            added = store.init_from_training(load_dataset(args.dataset), cfg.roster, args.threshold)
        except (AOPError, OSError, ValueError) as exc:
            _err("works", exc)
            return EXIT_FAIL
        store.save(cfg.works)
        comps.embedder.save_cache()
        print(f"added {added} work(s)")
        for name in store.agents:
            print(f"  {name}: {len(store.works(name))}")
    elif args.action == "list":
        for name in store.agents:
            works = store.works(name)
            print(f"{name}:")
            if not works:
                print("  no works")
            for w in works:
                print(f"  - [{w.source}] {w.task_text}")
    else:
        for name, st in store.stats().items():
            mean = st["mean_pairwise_similarity"]
            print(f"{name}: count={st['count']} mean_pairwise_similarity={'n/a' if mean is None else f'{mean:.4f}'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--script", help="scripted-backend JSONL (implies scripted mode)")
    common.add_argument("--replay", help="recording JSONL to replay (implies replay mode)")
    common.add_argument("--trace-dir", dest="trace_dir", help="directory for run traces")
    common.add_argument("--params", help="reward model params file")
    common.add_argument("--works", help="representative works store file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="aoplan", description="Agent-oriented planning for multi-agent systems")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="answer a query end to end")
    p.add_argument("query", nargs="?")
    p.add_argument("--file", help="file with one query per line (or JSONL)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("build-dataset", parents=[common], help="build reward-model training data")
    p.add_argument("queries")
    p.add_argument("--out", required=True)
    p.add_argument("--l", type=int, default=None, help="agents per sub-task (default: half the roster)")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", parents=[common], help="train the reward model")
    p.add_argument("dataset")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-csv", dest="loss_csv")
    p.add_argument("--embedding", choices=["hash", "minilm"], default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy / cost report over annotated queries")
    p.add_argument("queries")
    p.add_argument("--report", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("works", parents=[common], help="inspect or seed representative works")
    p.add_argument("action", choices=["list", "import", "stats"])
    p.add_argument("--dataset")
    p.add_argument("--threshold", type=float, default=7.0)
    p.set_defaults(func=cmd_works)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "train" and not args.params:
        print("error [train]: --params output path is required", file=sys.stderr)
        return EXIT_FAIL
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
