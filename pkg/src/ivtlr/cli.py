"""Command-line entry point: ``ivtlr {gen-data,train,eval,analyze}``.

Exit codes: 0 success, 1 usage, 2 data/config/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import substrate as S
from .analysis import (VARIANT_NOTES, VARIANTS, AnalysisError, attention_trajectory, evaluate, run_ablation,
                       spearman, sweep_latent_length, sweep_stages, variant_config)
from .checkpoint import CheckpointFormatError, load_checkpoint_with_meta
from .curriculum import DivergenceError, StagingError, TrainConfig, train_curriculum
from .latent import count_ar_steps, infer
from .model import CapacityError, ModelConfig, init_params
from .tasks import TaskSpecError, dumps_jsonl, generate_dataset, load_jsonl

log = logging.getLogger("ivtlr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRICS_HEADER = ["run_id", "stage", "n_latent", "split", "accuracy", "ar_steps_mean", "latency_ms_mean",
                  "n_samples"]


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class LatentConfig:
    k: int = 4
    exclude_previous: bool = True
    n_latent_eval: int = 3


@dataclass
class TaskConfig:
    n_samples: int = 2500
    hop_count: int = 3
    seed: int = 0
    short_rationale_fraction: float = 0.2


@dataclass
class IOConfig:
    data: str | None = None
    out: str | None = None


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    io: IOConfig = field(default_factory=IOConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "latent": LatentConfig, "task": TaskConfig,
             "io": IOConfig}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return cls(**values)


def parse_config(text: str) -> Config:
    """Parse one JSON document; unknown keys anywhere are an error.

    ``seed`` and ``latent.k`` are the single sources of truth: they fill
    ``train.seed`` / ``train.k`` unless those are given explicitly, and an
    explicit conflicting value is rejected.
    """
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)}")
    parts = {name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    train_raw = raw.get("train", {})
    latent_raw = raw.get("latent", {})
    train = parts["train"]
    if "seed" in train_raw and "seed" in raw and train_raw["seed"] != seed:
        raise ConfigError("train.seed conflicts with seed")
    if "seed" not in train_raw:
        train.seed = seed
    if "k" in train_raw and "k" in latent_raw and train_raw["k"] != latent_raw["k"]:
        raise ConfigError("train.k conflicts with latent.k")
    if "k" in train_raw:
        parts["latent"].k = train.k
    train.k = parts["latent"].k
    train.exclude_previous = parts["latent"].exclude_previous
    cfg = Config(seed=seed, **parts)
    try:
        cfg.model.validate()
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# output helpers


def atomic_write(path, data) -> None:
    """Write to a sibling temp file then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6f}"
    return str(x)


def csv_text(header, rows, comments=()) -> str:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(row[h]) for h in header])
    return buf.getvalue()


def sha256_hex(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _load_samples(path):
    path = Path(path)
    if path.is_dir():
        path = path / "test.jsonl"
    try:
        samples = load_jsonl(path)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset: {exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: bad dataset line: {exc}") from None
    if not samples:
        raise ConfigError(f"{path}: dataset is empty")
    return samples, path


def _load_ckpt(path):
    try:
        return load_checkpoint_with_meta(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.task != "grid-sum":
        raise ConfigError(f"unknown task {args.task!r}")
    train, test = generate_dataset(args.n, hop_count=args.hop_count, seed=args.seed,
                                   short_rationale_fraction=args.short_fraction)
    train_txt, test_txt = dumps_jsonl(train).encode(), dumps_jsonl(test).encode()
    manifest = {
        "generator": {"task": args.task, "n_samples": args.n, "hop_count": args.hop_count, "seed": args.seed,
                 "short_rationale_fraction": args.short_fraction},
        "counts": {"train": len(train), "test": len(test)},
        "content_hash": sha256_hex(train_txt, test_txt),
        "files": {"train.jsonl": sha256_hex(train_txt), "test.jsonl": sha256_hex(test_txt)},
    }
    out = Path(args.out)
    atomic_write(out / "train.jsonl", train_txt)
    atomic_write(out / "test.jsonl", test_txt)
    atomic_write(out / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(manifest["content_hash"])
    return EXIT_OK


def _progress(stage, epoch, step, loss):
    if step % 100 == 0:
        log.info("stage %d epoch %d step %d loss %.4f", stage, epoch, step, loss)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs_per_stage = args.epochs
    if args.variant is not None:
        cfg.train = variant_config(args.variant, cfg.train)
    data = args.data or cfg.io.data
    out = args.out or cfg.io.out
    if not data or not out:
        raise UsageError("train needs --data and --out (or io.data / io.out in the config)")
    train_path = Path(data) / "train.jsonl" if Path(data).is_dir() else Path(data)
    samples, _ = _load_samples(train_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    params = init_params(cfg.model, cfg.seed)
    _, paths, _ = train_curriculum(params, samples, cfg.train, out_dir=out, progress=_progress)
    atomic_write(out / "final_config.json", json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    params, meta = _load_ckpt(args.ckpt)
    samples, data_path = _load_samples(args.data)
    k = args.k if args.k is not None else params.cfg.default_k
    if args.n_latent < 0:
        raise UsageError("--n-latent must be non-negative")
    res = evaluate(params, samples, args.n_latent, k, mode=args.mode, exclude_previous=not args.no_exclude,
                   max_answer_len=args.max_answer_len)
    m = res.metrics
    row = {
        "run_id": args.run_id or Path(args.ckpt).stem,
        "stage": int(meta.get("stage", -1)),
        "n_latent": args.n_latent,
        "split": args.split or data_path.stem,
        "accuracy": m.accuracy,
        "ar_steps_mean": m.ar_steps_mean,
        "latency_ms_mean": m.latency_ms_mean,
        "n_samples": m.n_samples,
    }
    atomic_write(args.report, csv_text(METRICS_HEADER, [row]))
    if args.dump_per_sample:
        lines = []
        for rec, ok, ms in zip(res.records, res.correct, res.latencies_ms):
            lines.append(json.dumps({"sample_id": rec.sample_id, "n_latent": rec.n_latent,
                                     "emitted": [int(t) for t in rec.emitted],
                                     "answer": [int(t) for t in rec.answer], "correct": bool(ok),
                                     "ar_steps": count_ar_steps(rec), "latency_ms": round(ms, 6)},
                                    sort_keys=True))
        atomic_write(args.dump_per_sample, "\n".join(lines) + "\n")
    print(csv_text(METRICS_HEADER, [row]), end="")
    return EXIT_OK


def _analyze_attention(args) -> str:
    params, _ = _load_ckpt(args.ckpt)
    samples, _ = _load_samples(args.data)
    k = args.k if args.k is not None else params.cfg.default_k
    rows = []
    for s in sorted(samples, key=lambda s: s.id):
        rec = infer(s, params, args.n_latent, k, args.max_answer_len, capture=True)
        for step, r, f in attention_trajectory(rec):
            rows.append({"sample_id": s.id, "step": step, "R": r, "F": f})
    return csv_text(["sample_id", "step", "R", "F"], rows)


def _train_setup(args):
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs_per_stage = args.epochs
    data = Path(args.data or cfg.io.data or "")
    train, _ = _load_samples(data / "train.jsonl")
    test, _ = _load_samples(data / "test.jsonl")
    return cfg, train, test


_METRIC_COLS = ["accuracy", "ar_steps_mean", "latency_ms_mean", "n_samples"]


def _analyze_ablation(args) -> str:
    cfg, train, test = _train_setup(args)
    rows = []
    for variant in VARIANTS:
        m = run_ablation(variant, train, test, cfg.train, cfg.model)
        rows.append({"variant": variant, **{c: getattr(m, c) for c in _METRIC_COLS}})
    notes = [f"{v}: {VARIANT_NOTES[v]}" for v in VARIANTS]
    return csv_text(["variant"] + _METRIC_COLS, rows, comments=notes)


def _analyze_sweep_k(args) -> str:
    cfg, train, test = _train_setup(args)
    try:
        ks = [int(x) for x in args.k_values.split(",") if x.strip()]
    except ValueError:
        raise UsageError("--k-values must be comma-separated integers") from None
    rows = sweep_latent_length(ks, train, test, cfg.train, cfg.model)
    rho = spearman([r["k"] for r in rows], [r["accuracy"] for r in rows])
    return csv_text(["k"] + _METRIC_COLS, rows, comments=[f"seed={cfg.seed} spearman_k_accuracy={rho:.6f}"])


def _analyze_sweep_stage(args) -> str:
    samples, _ = _load_samples(args.data)
    ckpts, k = {}, args.k
    for n in (1, 2, 3):
        params, _ = _load_ckpt(Path(args.ckpt_dir) / f"stage{n}.ivtl")
        ckpts[n] = params
        k = params.cfg.default_k if k is None else k
    rows = sweep_stages(ckpts, samples, k)
    return csv_text(["stage", "n_latent"] + _METRIC_COLS, rows)


_ANALYZE = {"attention": _analyze_attention, "ablation": _analyze_ablation, "sweep-k": _analyze_sweep_k,
            "sweep-stage": _analyze_sweep_stage}


def cmd_analyze(args) -> int:
    if args.mode not in _ANALYZE:
        raise ConfigError(f"unknown analyze mode {args.mode!r}; choose from {', '.join(_ANALYZE)}")
    text = _ANALYZE[args.mode](args)
    atomic_write(args.report, text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ivtlr", description="Interleaved vision-text latent reasoning on Grid-Sum.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a Grid-Sum dataset")
    g.add_argument("--task", default="grid-sum")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--hop-count", type=int, default=3)
    g.add_argument("--short-fraction", type=float, default=0.2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the latent curriculum")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="override train.epochs_per_stage")
    t.add_argument("--variant", choices=VARIANTS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--n-latent", type=int, required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--k", type=int)
    e.add_argument("--mode", default="full", choices=["full", "no_latent_text", "no_latent_vision",
                                                      "no_latent_part"])
    e.add_argument("--no-exclude", action="store_true", help="allow reselecting earlier image positions")
    e.add_argument("--max-answer-len", type=int, default=48)
    e.add_argument("--run-id")
    e.add_argument("--split")
    e.add_argument("--dump-per-sample")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="attention, ablation and sweep reports")
    a.add_argument("--mode", required=True)
    a.add_argument("--report", required=True)
    a.add_argument("--ckpt")
    a.add_argument("--ckpt-dir")
    a.add_argument("--data")
    a.add_argument("--config")
    a.add_argument("--n-latent", type=int, default=3)
    a.add_argument("--k", type=int)
    a.add_argument("--k-values", default="1,2,4,8,16")
    a.add_argument("--seed", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--max-answer-len", type=int, default=48)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, S.NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, TaskSpecError, CheckpointFormatError, StagingError, AnalysisError, CapacityError,
            ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
