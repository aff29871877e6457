"""Command-line orchestration of the thread classification pipeline.

Configuration comes from an optional TOML file plus flag overrides; every
run writes its resolved configuration next to its outputs, and run-level
artifacts embed it.  Given the same config, inputs and seed, every command
produces byte-identical outputs.

Exit codes: 0 success, 1 validation failure, 2 I/O or usage error.
"""

from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from . import synth as synth_mod
from .coding_tree import (
    CodingTree,
    build_coding_tree,
    build_identity_coding_tree,
    build_random_coding_tree,
    coding_tree_to_payload,
    star_tree,
)
from .entropy import EntropyLedger, structural_entropy
from .features import DEFAULT_MAX_DIMS, TfidfVocabulary, fit_vocabulary
from .propagation import (
    LABELS,
    PropagationTree,
    ThreadRecord,
    apply_time_cutoff,
    build_propagation_tree,
    parse_threads,
    tree_from_payload,
    tree_to_payload,
    uniform_weights,
)
from .rvnn import TrainingConfig, evaluate, load_checkpoint, save_checkpoint, train
from .stats import analyze_event

CODING_MODES = ("entropy_greedy", "random", "identity")
SPLITS = ("leave_one_event_out", "fixed_files")
POOLS = ("sum", "mean", "max")


@dataclass
class PipelineConfig:
    K: int = 7
    min_weight: float = 1.0
    max_dims: int = DEFAULT_MAX_DIMS
    d: int = 64
    weighted: bool = True
    coding_mode: str = "entropy_greedy"
    pool: str = "sum"
    seed: int = 0
    split: str = "leave_one_event_out"
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.coding_mode not in CODING_MODES:
            raise ValueError(f"coding_mode must be one of {CODING_MODES}")
        if self.pool not in POOLS:
            raise ValueError(f"pool must be one of {POOLS}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        # hidden size, height and seed are pipeline-level; keep training in sync
        self.training = replace(self.training, d=self.d, K=self.K, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


_TOP_KEYS = {"k": "K", "min_weight": "min_weight", "max_dims": "max_dims",
             "d": "d", "weighted": "weighted", "coding_mode": "coding_mode",
             "pool": "pool", "seed": "seed", "split": "split"}
_TRAIN_KEYS = ("learning_rate", "warmup", "weight_decay", "epochs", "batch_size")


def load_config(path: str | None, overrides: dict) -> PipelineConfig:
    """TOML file (optional) merged with non-None flag overrides."""
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    top: dict = {}
    for key, fieldname in _TOP_KEYS.items():
        if key in raw:
            top[fieldname] = raw[key]
    train_raw = raw.get("training", {})
    tr: dict = {k: train_raw[k] for k in _TRAIN_KEYS if k in train_raw}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in _TRAIN_KEYS:
            tr[key] = value
        else:
            top[key] = value
    return PipelineConfig(training=TrainingConfig(**tr), **top)


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":"))
                    + "\n", encoding="utf-8")


def _write_resolved(out_dir: Path, cfg: PipelineConfig) -> None:
    _dump_json(out_dir / "resolved_config.json", cfg.to_dict())


def _worker_count() -> int:
    raw = os.environ.get("ENTROPIC_TREES_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(n, 1)


def _map_ordered(fn, items: list):
    """Apply fn over items (already in deterministic order), optionally on a
    bounded worker pool; results keep input order either way."""
    workers = _worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _read_threads(ctx, input_path: str) -> tuple[list[ThreadRecord], list]:
    try:
        with open(input_path, "r", encoding="utf-8") as fh:
            records, diags = parse_threads(fh)
    except OSError as exc:
        click.echo(f"error: cannot read {input_path}: {exc}", err=True)
        ctx.exit(2)
    for d in diags:
        tid = d.thread_id or "?"
        click.echo(f"warning: line {d.line} (thread {tid}): {d.reason}", err=True)
    return records, diags


def _require_labels(ctx, diags) -> None:
    if any("label" in d.reason for d in diags):
        click.echo("error: input has threads with missing or invalid labels",
                   err=True)
        ctx.exit(2)


def _build_graph(thread: ThreadRecord, cfg: PipelineConfig) -> PropagationTree:
    pt = build_propagation_tree(thread, min_weight=cfg.min_weight)
    return pt if cfg.weighted else uniform_weights(pt)


def _build_coding(graph: PropagationTree, cfg: PipelineConfig,
                  thread_id: str) -> CodingTree:
    if cfg.coding_mode == "entropy_greedy":
        return build_coding_tree(graph, cfg.K)
    if cfg.coding_mode == "random":
        seed = (cfg.seed & 0xFFFFFFFF) ^ zlib.crc32(thread_id.encode())
        return build_random_coding_tree(graph, cfg.K, seed)
    return build_identity_coding_tree(graph, cfg.K)


def _star_entropy(graph: PropagationTree) -> float:
    if graph.n_nodes < 2:
        return 0.0
    return EntropyLedger.from_tree(graph, star_tree(graph.n_nodes)).total_entropy()


def _fold_items(threads: list[ThreadRecord], cfg: PipelineConfig,
                vocab: TfidfVocabulary, ctx=None):
    """(coding tree, features, label index) per thread, skipping threads the
    coding mode cannot represent (with a diagnostic)."""
    def one(th: ThreadRecord):
        graph = _build_graph(th, cfg)
        try:
            ct = _build_coding(graph, cfg, th.thread_id)
        except ValueError as exc:
            return th.thread_id, str(exc)
        X = vocab.transform([p.text for p in th.posts])
        return th.thread_id, (ct, X, LABELS.index(th.label))
    out = []
    for tid, res in _map_ordered(one, threads):
        if isinstance(res, str):
            click.echo(f"warning: skipping thread {tid}: {res}", err=True)
        else:
            out.append(res)
    return out


def _train_fold(fold_threads: list[ThreadRecord], test_threads: list[ThreadRecord],
                cfg: PipelineConfig):
    vocab = fit_vocabulary([p.text for th in fold_threads for p in th.posts],
                           max_dims=cfg.max_dims)
    train_items = _fold_items(fold_threads, cfg, vocab)
    test_items = _fold_items(test_threads, cfg, vocab)
    if not train_items or not test_items:
        raise ValueError("a split side ended up empty after preprocessing")
    params, history = train(train_items, cfg.training, pool=cfg.pool)
    metrics = evaluate(params, test_items, pool=cfg.pool)
    metrics["train_loss"] = history[-1]["loss"]
    metrics["train_accuracy"] = history[-1]["accuracy"]
    return params, vocab, history, metrics


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="TOML config file.")
@click.option("--k", type=int, default=None, help="Coding-tree height K.")
@click.option("--min-weight", type=float, default=None)
@click.option("--max-dims", type=int, default=None)
@click.option("--d", type=int, default=None, help="Hidden state size.")
@click.option("--weighted/--unweighted", "weighted", default=None)
@click.option("--coding-mode", type=click.Choice(CODING_MODES), default=None)
@click.option("--pool", type=click.Choice(POOLS), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--split", type=click.Choice(SPLITS), default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--warmup", type=float, default=None)
@click.option("--weight-decay", type=float, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.pass_context
def main(ctx, config_path, **overrides):
    """Build propagation trees, compress them into coding trees, and train
    or evaluate the veracity classifier."""
    top = {v: overrides.pop(k) for k, v in
           [("k", "K"), ("min_weight", "min_weight"), ("max_dims", "max_dims"),
            ("d", "d"), ("weighted", "weighted"), ("coding_mode", "coding_mode"),
            ("pool", "pool"), ("seed", "seed"), ("split", "split")]}
    top.update(overrides)
    try:
        ctx.obj = load_config(config_path, top)
    except OSError as exc:
        click.echo(f"error: cannot read config: {exc}", err=True)
        ctx.exit(2)
    except (ValueError, TypeError, tomllib.TOMLDecodeError) as exc:
        click.echo(f"error: bad config: {exc}", err=True)
        ctx.exit(2)


@main.command()
@click.argument("input_path", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.pass_context
def ingest(ctx, input_path, out_dir):
    """Parse a thread JSONL file into propagation trees plus an audit."""
    cfg: PipelineConfig = ctx.obj
    records, diags = _read_threads(ctx, input_path)
    seen: dict[str, ThreadRecord] = {}
    for th in records:
        if th.thread_id in seen:
            click.echo(f"warning: duplicate thread id {th.thread_id}; "
                       "keeping the first", err=True)
        else:
            seen[th.thread_id] = th
    threads = [seen[tid] for tid in sorted(seen)]
    out = Path(out_dir)
    trees_dir = out / "trees"
    trees_dir.mkdir(parents=True, exist_ok=True)

    def one(th: ThreadRecord):
        pt = build_propagation_tree(th, min_weight=cfg.min_weight)
        return th, pt

    labels: dict[str, dict] = {}
    n_posts = 0
    depth_sum = 0
    clamped = 0
    hist = {lab: 0 for lab in LABELS}
    for th, pt in _map_ordered(one, threads):
        payload = tree_to_payload(pt)
        payload["thread_id"] = th.thread_id
        payload["texts"] = [p.text for p in th.posts]
        payload["label"] = th.label
        payload["event"] = th.event
        _dump_json(trees_dir / f"{th.thread_id}.json", payload)
        labels[th.thread_id] = {"label": th.label, "event": th.event,
                                "n_posts": len(th.posts)}
        n_posts += len(th.posts)
        depth_sum += pt.max_depth()
        clamped += pt.n_clamped
        hist[th.label] += 1
    n_claims = len(threads)
    audit = {
        "config": cfg.to_dict(),
        "n_claims": n_claims,
        "n_posts": n_posts,
        "label_histogram": hist,
        "avg_posts_per_thread": (n_posts / n_claims) if n_claims else 0.0,
        "avg_tree_depth": (depth_sum / n_claims) if n_claims else 0.0,
        "n_clamped_edges": clamped,
        "n_parse_diagnostics": len(diags),
    }
    _dump_json(out / "labels.json", {"config": cfg.to_dict(), "labels": labels})
    _dump_json(out / "audit.json", audit)
    _write_resolved(out, cfg)
    click.echo(f"claims: {n_claims}")
    click.echo(f"posts: {n_posts}")
    click.echo("labels: " + " ".join(f"{lab}={hist[lab]}" for lab in LABELS))
    click.echo(f"avg posts/thread: {audit['avg_posts_per_thread']:.1f}")
    click.echo(f"avg tree depth: {audit['avg_tree_depth']:.1f}")


@main.command()
@click.argument("trees_dir", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.pass_context
def encode(ctx, trees_dir, out_dir):
    """Compress ingested propagation trees into height-K coding trees."""
    cfg: PipelineConfig = ctx.obj
    src = Path(trees_dir)
    if src.joinpath("trees").is_dir():
        src = src / "trees"
    files = sorted(src.glob("*.json"))
    if not files:
        click.echo(f"error: no tree files under {trees_dir}", err=True)
        ctx.exit(2)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(path: Path):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            graph = tree_from_payload(payload)
            tid = payload["thread_id"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            return path.name, None, f"{exc}"
        if not cfg.weighted:
            graph = uniform_weights(graph)
        try:
            ct = _build_coding(graph, cfg, tid)
        except ValueError as exc:
            return path.name, None, f"{exc}"
        h_star = _star_entropy(graph)
        h_after = structural_entropy(graph, ct)
        body = coding_tree_to_payload(ct, list(graph.node_ids))
        return path.name, {
            "thread_id": tid,
            "entropy_before": h_star,
            "entropy_after": h_after,
            "tree": body,
        }, None

    skipped = 0
    for name, body, err in _map_ordered(one, files):
        if body is None:
            click.echo(f"warning: skipping {name}: {err}", err=True)
            skipped += 1
            continue
        _dump_json(out / name, body)
        click.echo(f"{body['thread_id']} entropy {body['entropy_before']:.6f}"
                   f" -> {body['entropy_after']:.6f}")
    _write_resolved(out, cfg)
    if skipped:
        click.echo(f"error: skipped {skipped} unreadable tree file(s)", err=True)
        ctx.exit(1)


@main.group()
def entropy():
    """Structural entropy reports."""


@entropy.command("audit")
@click.argument("trees_dir", type=click.Path())
@click.pass_context
def entropy_audit(ctx, trees_dir):
    """Print per-thread entropy before and after coding-tree compression."""
    cfg = ctx.find_object(PipelineConfig)
    src = Path(trees_dir)
    if src.joinpath("trees").is_dir():
        src = src / "trees"
    files = sorted(src.glob("*.json"))
    if not files:
        click.echo(f"error: no tree files under {trees_dir}", err=True)
        ctx.exit(2)
    total_before = total_after = 0.0
    bad = 0
    for path in files:
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            graph = tree_from_payload(payload)
            tid = payload["thread_id"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            click.echo(f"warning: skipping {path.name}: {exc}", err=True)
            bad += 1
            continue
        if not cfg.weighted:
            graph = uniform_weights(graph)
        try:
            ct = _build_coding(graph, cfg, tid)
        except ValueError as exc:
            click.echo(f"warning: skipping {path.name}: {exc}", err=True)
            bad += 1
            continue
        before = _star_entropy(graph)
        after = structural_entropy(graph, ct)
        total_before += before
        total_after += after
        click.echo(f"{tid} entropy {before:.6f} -> {after:.6f}")
    click.echo(f"total entropy {total_before:.6f} -> {total_after:.6f}")
    if bad:
        ctx.exit(1)


def _split_folds(ctx, cfg: PipelineConfig, threads: list[ThreadRecord],
                 split_file: str | None):
    """Folds as (name, train_threads, test_threads)."""
    by_id = {th.thread_id: th for th in threads}
    if cfg.split == "fixed_files":
        if split_file is None:
            click.echo("error: split=fixed_files needs --split-file", err=True)
            ctx.exit(2)
        try:
            spec = json.loads(Path(split_file).read_text(encoding="utf-8"))
            train_ids = list(spec["train"])
            test_ids = list(spec["test"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            click.echo(f"error: cannot read split file: {exc}", err=True)
            ctx.exit(2)
        missing = [t for t in train_ids + test_ids if t not in by_id]
        if missing:
            click.echo("error: split references threads with no labeled "
                       f"record: {missing[:5]}", err=True)
            ctx.exit(2)
        return [("fixed", [by_id[t] for t in train_ids],
                 [by_id[t] for t in test_ids])]
    events = sorted({th.event for th in threads})
    if len(events) < 2:
        click.echo("error: leave_one_event_out needs at least 2 events",
                   err=True)
        ctx.exit(2)
    folds = []
    for ev in events:
        test = [th for th in threads if th.event == ev]
        rest = [th for th in threads if th.event != ev]
        folds.append((ev, rest, test))
    return folds


@main.command("train")
@click.argument("input_path", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.option("--split-file", type=click.Path(), default=None,
              help="JSON with train/test id lists (fixed_files split).")
@click.pass_context
def train_cmd(ctx, input_path, out_dir, split_file):
    """Train the classifier under the configured split protocol."""
    cfg: PipelineConfig = ctx.obj
    records, diags = _read_threads(ctx, input_path)
    _require_labels(ctx, diags)
    if not records:
        click.echo("error: no usable threads in input", err=True)
        ctx.exit(2)
    threads = sorted(records, key=lambda th: th.thread_id)
    folds = _split_folds(ctx, cfg, threads, split_file)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fold_metrics: dict[str, dict] = {}
    for name, train_threads, test_threads in folds:
        try:
            params, vocab, history, metrics = _train_fold(
                train_threads, test_threads, cfg)
        except (ValueError, RuntimeError) as exc:
            click.echo(f"error: fold {name}: {exc}", err=True)
            ctx.exit(1)
        tag = "checkpoint.bin" if name == "fixed" else f"checkpoint_{name}.bin"
        save_checkpoint(out / tag, params,
                        meta={"config": cfg.to_dict(), "fold": name,
                              "vocab": vocab.to_payload(),
                              "labels": list(LABELS)})
        fold_metrics[name] = {"metrics": metrics, "history": history,
                              "n_train": len(train_threads),
                              "n_test": len(test_threads)}
        click.echo(f"fold {name}: accuracy {metrics['accuracy']:.4f} "
                   f"macro_f1 {metrics['macro_f1']:.4f}")
    agg = {
        "accuracy": sum(f["metrics"]["accuracy"] for f in fold_metrics.values())
        / len(fold_metrics),
        "macro_f1": sum(f["metrics"]["macro_f1"] for f in fold_metrics.values())
        / len(fold_metrics),
    }
    _dump_json(out / "metrics.json", {"config": cfg.to_dict(),
                                      "folds": fold_metrics,
                                      "aggregate": agg})
    _write_resolved(out, cfg)
    click.echo(f"aggregate: accuracy {agg['accuracy']:.4f} "
               f"macro_f1 {agg['macro_f1']:.4f}")


@main.command("eval")
@click.argument("input_path", type=click.Path())
@click.argument("checkpoint", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.option("--deadline", type=float, default=None,
              help="Drop posts later than this many seconds after the claim.")
@click.pass_context
def eval_cmd(ctx, input_path, checkpoint, out_dir, deadline):
    """Evaluate a trained checkpoint; optional early-detection deadline."""
    records, diags = _read_threads(ctx, input_path)
    _require_labels(ctx, diags)
    if not records:
        click.echo("error: no usable threads in input", err=True)
        ctx.exit(2)
    try:
        params, meta = load_checkpoint(checkpoint)
        stored = meta["config"]
        vocab = TfidfVocabulary.from_payload(meta["vocab"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        click.echo(f"error: cannot load checkpoint: {exc}", err=True)
        ctx.exit(2)
    # the checkpoint's stored config drives preprocessing so features and
    # geometry match what the model was trained on
    cfg = PipelineConfig(
        K=stored["K"], min_weight=stored["min_weight"],
        max_dims=stored["max_dims"], d=stored["d"],
        weighted=stored["weighted"], coding_mode=stored["coding_mode"],
        pool=stored["pool"], seed=stored["seed"], split=stored["split"],
        training=TrainingConfig(**stored["training"]))
    threads = sorted(records, key=lambda th: th.thread_id)
    if deadline is not None:
        try:
            threads = [apply_time_cutoff(th, deadline) for th in threads]
        except ValueError as exc:
            click.echo(f"error: bad deadline: {exc}", err=True)
            ctx.exit(2)
    items = _fold_items(threads, cfg, vocab)
    if not items:
        click.echo("error: nothing left to evaluate", err=True)
        ctx.exit(1)
    metrics = evaluate(params, items, pool=cfg.pool)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "metrics.json", {"config": cfg.to_dict(),
                                      "deadline": deadline,
                                      "n_threads": len(items),
                                      "metrics": metrics})
    _write_resolved(out, cfg)
    click.echo(f"accuracy {metrics['accuracy']:.4f} "
               f"macro_f1 {metrics['macro_f1']:.4f}")


@main.group("stats")
def stats_grp():
    """Temporal statistics over reply delays."""


def _event_report(ctx, input_path, event):
    records, _ = _read_threads(ctx, input_path)
    if event is not None:
        records = [th for th in records if th.event == event]
    if not records:
        click.echo("error: no threads selected", err=True)
        ctx.exit(2)
    try:
        return analyze_event(records)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(1)


@stats_grp.command("ecdf")
@click.argument("input_path", type=click.Path())
@click.argument("out_tsv", type=click.Path())
@click.option("--event", default=None, help="Restrict to one event.")
@click.pass_context
def stats_ecdf(ctx, input_path, out_tsv, event):
    """Write per-label reply-delay ECDFs as TSV."""
    report = _event_report(ctx, input_path, event)
    Path(out_tsv).write_text(report.tsv, encoding="utf-8")
    click.echo(f"wrote {out_tsv}")


@stats_grp.command("adtest")
@click.argument("input_path", type=click.Path())
@click.option("--event", default=None, help="Restrict to one event.")
@click.pass_context
def stats_adtest(ctx, input_path, event):
    """Test whether per-label delay distributions differ."""
    report = _event_report(ctx, input_path, event)
    ad = report.ad
    verdict = "different" if ad.reject_at_5pct else "not distinguishable"
    click.echo(json.dumps({
        "statistic": ad.statistic,
        "standardized": ad.standardized,
        "k": ad.k,
        "n_total": ad.n_total,
        "p_range": list(ad.p_range),
        "verdict_at_5pct": verdict,
    }, sort_keys=True))


@main.command("synth")
@click.argument("out_path", type=click.Path())
@click.option("--n-threads", type=int, default=300, show_default=True)
@click.option("--n-posts", type=int, default=synth_mod.DEFAULT_N_POSTS,
              show_default=True)
@click.pass_context
def synth_cmd(ctx, out_path, n_threads, n_posts):
    """Generate the paired two-class synthetic corpus plus its split file."""
    cfg: PipelineConfig = ctx.obj
    try:
        threads = synth_mod.synth_threads(n_threads, seed=cfg.seed,
                                          n_posts=n_posts)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(2)
    out = Path(out_path)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    synth_mod.write_jsonl(out, threads)
    train_ids, test_ids = synth_mod.synth_split(threads)
    _dump_json(out.with_suffix(".split.json"),
               {"config": cfg.to_dict(), "train": train_ids, "test": test_ids})
    click.echo(f"wrote {len(threads)} threads to {out_path}")


if __name__ == "__main__":  # pragma: no cover
    main()
