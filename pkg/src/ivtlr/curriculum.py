"""Progressive latent curriculum.

Stage 0 is ordinary chain-of-thought fine-tuning. Stage n swaps the first n
rationale steps for n latent slots; the latent phase runs multipass (one
forward per slot, gradients flowing through the reinjected hidden states and
the selected patch embeddings), then one teacher-forced pass over the whole
sequence scores the remaining steps and the answer.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import substrate as S
from . import vocab
from .checkpoint import save_checkpoint
from .latent import MODES, run_latent_phase
from .model import Params, embed_inputs, forward, token_embeddings

log = logging.getLogger(__name__)


class StagingError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    n_stages: int = 4
    epochs_per_stage: int = 3
    seed: int = 0
    k: int = 4
    grad_clip: float = 1.0
    mode: str = "full"
    exclude_previous: bool = True
    no_cot: bool = False

    def validate(self) -> None:
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs_per_stage < 0:
            raise ValueError("batch_size must be >= 1 and epochs_per_stage >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k < 0 or (self.k == 0 and self.mode in ("full", "no_latent_text")):
            raise ValueError("k must be >= 1 for modes that select latent vision")


@dataclass
class StagePlan:
    stage: int
    n_latent: int
    drop_rationale: bool = False

    @classmethod
    def for_stage(cls, stage: int, no_cot: bool = False) -> "StagePlan":
        if stage < 0:
            raise StagingError("stage must be non-negative")
        return cls(stage=stage, n_latent=0 if no_cot else stage, drop_rationale=no_cot)


@dataclass
class StageExample:
    """One staged training sequence before latent expansion.

    ``ids`` covers question, image, latent slots and tail; image and slot
    positions hold -1 / ``<latent>``. ``mask[t]`` marks supervised *target*
    positions (the token at t is predicted from position t - 1).
    """

    sample: object
    n_latent: int
    ids: list
    tags: list
    mask: np.ndarray
    latent_slots: list
    tail: list = field(default_factory=list)

    @property
    def layout(self) -> tuple:
        return (len(self.sample.question_tokens), self.n_latent, len(self.tail))


def build_stage_example(sample, plan: StagePlan, n_patches: int = 16) -> StageExample:
    steps = sample.rationale_steps
    n_lat = min(plan.n_latent, len(steps))
    if plan.n_latent > 0 and not steps:
        raise StagingError(f"{sample.id}: no rationale steps to replace")
    q = vocab.encode(sample.question_tokens)
    tail, tail_tags = [], []
    if not plan.drop_rationale:
        for step in steps[n_lat:]:
            ids = vocab.encode(step) + [vocab.STEP_ID]
            tail += ids
            tail_tags += ["rationale"] * len(ids)
    answer = vocab.encode(sample.answer_tokens) + [vocab.EOS_ID]
    tail += answer
    tail_tags += ["answer"] * len(answer)
    ids = q + [-1] * n_patches + [vocab.LATENT_ID] * n_lat + tail
    tags = ["text"] * len(q) + ["image"] * n_patches + ["latent_text"] * n_lat + tail_tags
    mask = np.array([t in ("rationale", "answer") for t in tags], dtype=bool)
    slots = list(range(len(q) + n_patches, len(q) + n_patches + n_lat))
    return StageExample(sample, n_lat, ids, tags, mask, slots, tail)


def _group_by_layout(examples):
    groups: dict = {}
    for ex in examples:
        groups.setdefault(ex.layout, []).append(ex)
    return [groups[key] for key in sorted(groups)]


def stage_loss(params: Params, batch, k: int, mode: str = "full", exclude_previous: bool = True,
               logits_hook=None):
    """Mean NLL over all supervised target positions in ``batch``.

    Examples with different layouts run as separate sub-batches; the result
    is weighted by supervised-position count, so it equals the plain mean
    over every supervised position. ``logits_hook(logits, tags)`` may
    replace the final-pass logits (tests use it to perturb masked rows).
    """
    if not batch:
        raise StagingError("empty batch")
    total = sum(int(ex.mask.sum()) for ex in batch)
    loss = None
    for group in _group_by_layout(batch):
        n_lat = group[0].n_latent
        seq = embed_inputs(params, [ex.sample for ex in group])
        state = run_latent_phase(seq, params, n_lat, k, mode, exclude_previous)
        tail_ids = np.array([ex.tail for ex in group], dtype=np.int64)
        content = S.concat_rows([state.seq.content, token_embeddings(params, tail_ids)])
        tags = list(state.seq.tags) + list(group[0].tags[len(group[0].tags) - tail_ids.shape[1]:])
        trace = forward(params, content)
        logits = trace.logits
        if logits_hook is not None:
            logits = logits_hook(logits, tags)
        n = len(tags)
        start = n - tail_ids.shape[1]
        targets = np.zeros((len(group), n - 1), dtype=np.int64)
        targets[:, start - 1:] = tail_ids
        mask = np.zeros((len(group), n - 1), dtype=bool)
        mask[:, start - 1:] = True
        target_tags = tags[1:]
        if any(t not in ("rationale", "answer") for t, m in zip(target_tags, mask[0]) if m):
            raise AssertionError("mask covers a question, image or latent position")
        part = S.nll(S.slice_rows(logits, 0, n - 1), targets, mask)
        part = S.scale(part, mask.sum() / total)
        loss = part if loss is None else S.add(loss, part)
    if not np.isfinite(loss.data):
        raise S.NumericError("non-finite loss")
    return loss


class Adam:
    """Adam with bias correction and global-norm clipping; moments live in float64."""

    def __init__(self, params: Params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip: float | None = 1.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = {name: np.zeros(t.shape) for name, t in params.items()}
        self.v = {name: np.zeros(t.shape) for name, t in params.items()}
        self.t = 0

    def step(self, grads: dict) -> float:
        """Apply one update from ``{name: gradient}``; returns the pre-clip global norm."""
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / norm
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, t in self.params.items():
            g = grads[name] * factor
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.data = (t.data - update).astype(t.data.dtype)
        return norm


def loss_and_grads(params: Params, batch, cfg: TrainConfig):
    with S.Graph() as g:
        loss = stage_loss(params, batch, cfg.k, cfg.mode, cfg.exclude_previous)
        grads = S.backward(loss, g)
    return float(loss.data), {name: S.grad_of(grads, t) for name, t in params.items()}


def train_stage(params: Params, dataset, plan: StagePlan, cfg: TrainConfig, log_fh=None,
                progress=None) -> list[dict]:
    """Run ``epochs_per_stage`` epochs at one stage; updates ``params`` in place.

    Optimizer moments start fresh at every stage. Returns per-epoch records
    ``{stage, epoch, mean_loss, wallclock_ms}``.
    """
    cfg.validate()
    examples = [build_stage_example(s, plan, params.cfg.n_patches) for s in dataset]
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.grad_clip)
    records = []
    for epoch in range(cfg.epochs_per_stage):
        t0 = time.monotonic()
        order = np.random.default_rng([cfg.seed, plan.stage, epoch]).permutation(len(examples))
        losses = []
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [examples[i] for i in order[lo:lo + cfg.batch_size]]
            try:
                loss, grads = loss_and_grads(params, batch, cfg)
            except S.NumericError as exc:
                raise DivergenceError(f"stage {plan.stage} epoch {epoch} step {step}: {exc}") from exc
            opt.step(grads)
            losses.append(loss)
            if progress is not None:
                progress(plan.stage, epoch, step, loss)
        rec = {
            "stage": plan.stage,
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "wallclock_ms": round((time.monotonic() - t0) * 1000.0, 3),
        }
        log.info("stage %d epoch %d mean loss %.4f", plan.stage, epoch, rec["mean_loss"])
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()
    return records


def train_curriculum(params: Params, dataset, cfg: TrainConfig, out_dir=None, start_stage: int = 0,
                     progress=None) -> tuple[Params, list[Path], list[dict]]:
    """Stages ``start_stage .. n_stages-1`` in order, checkpointing after each.

    Checkpoints are ``stage{n}.ivtl`` in ``out_dir``; the log goes to
    ``train_log.jsonl`` there (appended).
    """
    cfg.validate()
    paths, records = [], []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a", encoding="utf-8")
    try:
        for stage in range(start_stage, cfg.n_stages):
            plan = StagePlan.for_stage(stage, cfg.no_cot)
            records += train_stage(params, dataset, plan, cfg, log_fh, progress)
            if out_dir is not None:
                path = out_dir / f"stage{stage}.ivtl"
                save_checkpoint(params, path, {"stage": stage, "train": asdict(cfg)})
                paths.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return params, paths, records
