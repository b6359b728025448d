"""Evaluation, attention diagnostics, ablations and sweeps."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import vocab
from .curriculum import TrainConfig, train_curriculum
from .latent import RunRecord, count_ar_steps, infer
from .model import ModelConfig, Params, init_params

FOCUS_EPS = 1e-6
VARIANTS = ("full", "no_latent_text", "no_latent_vision", "no_latent_part", "no_cot", "explicit_cot")

# written into ablation report headers
VARIANT_NOTES = {
    "full": "latent block = [last hidden state, k attention-selected patch embeddings]",
    "no_latent_text": "latent block = k selected patch embeddings; the <latent> slot embedding replaces the hidden state",
    "no_latent_vision": "latent block = [last hidden state] only (k = 0)",
    "no_latent_part": "latent block = learned <latent> embedding only (pause tokens)",
    "no_cot": "question+image -> answer fine-tune, no rationale, same total epochs",
    "explicit_cot": "stage-0 model decoding full rationales",
}


class AnalysisError(ValueError):
    pass


@dataclass
class RunMetrics:
    accuracy: float
    ar_steps_mean: float
    latency_ms_mean: float
    n_samples: int
    per_step_ratio: list = field(default_factory=list)
    per_step_focus: list = field(default_factory=list)


def _strip(tokens) -> list:
    return [t for t in tokens if t not in (vocab.EOS_ID, vocab.PAD_ID, vocab.EOS, vocab.PAD)]


def exact_match_accuracy(predictions, references) -> float:
    if len(predictions) != len(references):
        raise AnalysisError(f"{len(predictions)} predictions for {len(references)} references")
    if not predictions:
        raise AnalysisError("no predictions")
    hits = sum(_strip(p) == _strip(r) for p, r in zip(predictions, references))
    return hits / len(predictions)


def summed_attention(attn: np.ndarray, query: int) -> np.ndarray:
    """Attention from one query row summed over layers and heads; (L, H, T, T) -> (T,)."""
    return attn[:, :, query, :].astype(np.float64).sum(axis=(0, 1))


def attention_ratio(attn: np.ndarray, query: int, image_positions, text_positions) -> float:
    """Summed attention on the selected image positions over that on text positions."""
    text_positions = list(text_positions)
    if not text_positions:
        raise AnalysisError("text position set is empty")
    row = summed_attention(attn, query)
    denom = float(row[np.asarray(text_positions, dtype=np.int64)].sum())
    if denom == 0.0:
        raise AnalysisError("zero attention mass on text positions")
    image_positions = np.asarray(list(image_positions), dtype=np.int64)
    num = float(row[image_positions].sum()) if image_positions.size else 0.0
    return num / denom


def attention_focus(attn: np.ndarray, query: int, positions, eps: float = FOCUS_EPS) -> float:
    """Inverse entropy 1 / (H + eps) of the attention distribution over ``positions``."""
    positions = np.asarray(list(positions), dtype=np.int64)
    if positions.size == 0:
        raise AnalysisError("position set is empty")
    mass = summed_attention(attn, query)[positions]
    tot = mass.sum()
    if tot <= 0.0:
        raise AnalysisError("zero attention mass over positions")
    p = mass / tot
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return 1.0 / (entropy + eps)


def focus_bounds(m: int, eps: float = FOCUS_EPS) -> tuple[float, float]:
    return 1.0 / (math.log(m) + eps), 1.0 / eps


def attention_trajectory(record: RunRecord, n_latent: int | None = None) -> list[tuple[int, float, float]]:
    """(step, R, F) per latent step of a run made with ``capture=True``.

    The query row is the position whose final state became that step's latent
    text; R compares the step's selected image positions against question
    text plus earlier latent-text (hidden-state) positions; F is taken over
    the whole prefix up to and including the query.
    """
    state = record.state
    n = record.n_latent if n_latent is None else min(n_latent, record.n_latent)
    if n == 0:
        return []
    if state is None or len(state.traces) < n:
        raise AnalysisError("run was not captured with traces")
    question = [p for p, tag in enumerate(state.seq.tags) if tag == "text"]
    out = []
    for i in range(n):
        attn = state.traces[i].attn_of(0)
        q = state.query_positions[i]
        text = question + list(state.latent_text_positions[:i])
        chosen = state.selected[i][0] if state.selected[i].size else []
        r = attention_ratio(attn, q, chosen, text)
        f = attention_focus(attn, q, range(q + 1))
        out.append((i + 1, r, f))
    return out


@dataclass
class EvalResult:
    metrics: RunMetrics
    records: list
    correct: list
    latencies_ms: list
    trajectories: dict = field(default_factory=dict)


def evaluate(params: Params, samples, n_latent: int, k: int, mode: str = "full",
             exclude_previous: bool = True, capture: bool = False, max_answer_len: int = 48) -> EvalResult:
    """Greedy exact-match evaluation; latency is the monotonic span of each ``infer`` call."""
    if not samples:
        raise AnalysisError("no samples to evaluate")
    records, correct, lat = [], [], []
    trajectories = {}
    for s in sorted(samples, key=lambda s: s.id):
        t0 = time.perf_counter()
        rec = infer(s, params, n_latent, k, max_answer_len, mode, exclude_previous, capture=False)
        lat.append((time.perf_counter() - t0) * 1000.0)
        records.append(rec)
        correct.append(rec.answer == vocab.encode(s.answer_tokens))
        if capture and rec.n_latent:
            traced = infer(s, params, n_latent, k, max_answer_len, mode, exclude_previous, capture=True)
            trajectories[s.id] = attention_trajectory(traced)
    ratios, focuses = [], []
    if trajectories:
        depth = max(len(t) for t in trajectories.values())
        for i in range(depth):
            rs = [t[i][1] for t in trajectories.values() if len(t) > i]
            fs = [t[i][2] for t in trajectories.values() if len(t) > i]
            ratios.append(float(np.mean(rs)))
            focuses.append(float(np.mean(fs)))
    metrics = RunMetrics(
        accuracy=float(np.mean(correct)),
        ar_steps_mean=float(np.mean([count_ar_steps(r) for r in records])),
        latency_ms_mean=float(np.mean(lat)),
        n_samples=len(records),
        per_step_ratio=ratios,
        per_step_focus=focuses,
    )
    return EvalResult(metrics, records, correct, lat, trajectories)


def variant_config(variant: str, cfg: TrainConfig) -> TrainConfig:
    if variant == "full":
        return replace(cfg, mode="full", no_cot=False)
    if variant in ("no_latent_text", "no_latent_vision", "no_latent_part"):
        return replace(cfg, mode=variant, no_cot=False)
    if variant == "no_cot":
        return replace(cfg, mode="full", no_cot=True)
    if variant == "explicit_cot":
        return replace(cfg, mode="full", no_cot=False, n_stages=1)
    raise AnalysisError(f"unknown variant {variant!r}")


def train_variant(variant: str, train_samples, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                  out_dir=None, progress=None) -> Params:
    vcfg = variant_config(variant, cfg)
    params = init_params(model_cfg or ModelConfig(), vcfg.seed)
    params, _, _ = train_curriculum(params, train_samples, vcfg, out_dir=out_dir, progress=progress)
    return params


def eval_latent_count(variant: str, cfg: TrainConfig) -> int:
    if variant in ("no_cot", "explicit_cot"):
        return 0
    return cfg.n_stages - 1


def run_ablation(variant: str, train_samples, test_samples, cfg: TrainConfig,
                 model_cfg: ModelConfig | None = None, params: Params | None = None,
                 capture: bool = False) -> RunMetrics:
    """Train (unless ``params`` is given) and evaluate one ablation variant."""
    if variant not in VARIANTS:
        raise AnalysisError(f"unknown variant {variant!r}")
    vcfg = variant_config(variant, cfg)
    if params is None:
        params = train_variant(variant, train_samples, cfg, model_cfg)
    k = 0 if vcfg.mode == "no_latent_vision" else vcfg.k
    return evaluate(params, test_samples, eval_latent_count(variant, cfg), k, vcfg.mode,
                    vcfg.exclude_previous, capture=capture).metrics


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties; nan when either side is constant."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=np.float64)
        for val in np.unique(v):
            idx = v == val
            r[idx] = r[idx].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    if rx.std() == 0 or ry.std() == 0:
        return float("nan")
    return float(np.corrcoef(rx, ry)[0, 1])


def sweep_latent_length(k_values, train_samples, test_samples, cfg: TrainConfig,
                        model_cfg: ModelConfig | None = None) -> list[dict]:
    """One trained model per k; rows of (k, accuracy, ar_steps, latency)."""
    if not k_values:
        raise AnalysisError("k_values is empty")
    rows = []
    for k in k_values:
        kcfg = replace(cfg, k=int(k))
        m = run_ablation("full", train_samples, test_samples, kcfg, model_cfg)
        rows.append({"k": int(k), "accuracy": m.accuracy, "ar_steps_mean": m.ar_steps_mean,
                     "latency_ms_mean": m.latency_ms_mean, "n_samples": m.n_samples})
    return rows


def sweep_stages(checkpoints: dict, test_samples, k: int, stages=(1, 2, 3)) -> list[dict]:
    """Evaluate stage-n checkpoints with n latent steps (mixed explicit-latent decoding)."""
    rows = []
    for n in stages:
        m = evaluate(checkpoints[n], test_samples, n, k).metrics
        rows.append({"stage": n, "n_latent": n, "accuracy": m.accuracy, "ar_steps_mean": m.ar_steps_mean,
                     "latency_ms_mean": m.latency_ms_mean, "n_samples": m.n_samples})
    return rows
