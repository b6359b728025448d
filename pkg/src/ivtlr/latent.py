"""Step-wise multimodal latent reasoning.

The working sequence starts as ``[question][image][<latent> x n]``. Latent
step i runs one forward pass over everything before slot ``l_i``, takes the
final-layer state at the last position (latent text) and the k image
embeddings that received the most attention from that position summed over
all layers and heads (latent vision), and inserts the block
``[h_i, z_sel...]`` at ``l_i``. The ``<latent>`` placeholder that sat at
``l_i`` moves behind the block and becomes the query position for the next
step; every later slot shifts by the block size.

Ablation modes change the block contents only:

* ``full``             -> [h, z_1..z_k]       (k + 1 rows)
* ``no_latent_text``   -> [z_1..z_k]          (k rows; the placeholder stands in for h)
* ``no_latent_vision`` -> [h]                 (1 row)
* ``no_latent_part``   -> [<latent> embedding] (1 row, pause-token style)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import substrate as S
from . import vocab
from .model import CapacityError, EmbeddedSeq, Params, embed_inputs, forward, greedy_decode, token_embeddings

MODES = ("full", "no_latent_text", "no_latent_vision", "no_latent_part")


class SelectionError(ValueError):
    pass


def block_size(mode: str, k: int) -> int:
    if mode == "full":
        return k + 1
    if mode == "no_latent_text":
        return k
    if mode in ("no_latent_vision", "no_latent_part"):
        return 1
    raise ValueError(f"unknown latent mode {mode!r}")


def attention_scores(attn: np.ndarray, query: int = -1) -> np.ndarray:
    """Column scores at one query row summed over layers and heads, (L, H, T, T) -> (T,)."""
    return attn[:, :, query, :].astype(np.float64).sum(axis=(0, 1))


def select_latent_vision(attn: np.ndarray, image_positions, k: int, excluded=()) -> np.ndarray:
    """Top-k image positions by attention from the final row.

    Ties go to the lower position. Returns ``min(k, available)`` positions in
    descending score order.
    """
    if k < 1:
        raise SelectionError("k must be at least 1")
    excluded = set(int(e) for e in excluded)
    candidates = np.array([p for p in image_positions if int(p) not in excluded], dtype=np.int64)
    if candidates.size == 0:
        raise SelectionError("no image positions left to select")
    scores = attention_scores(attn)[candidates]
    order = np.lexsort((candidates, -scores))
    return candidates[order[:k]]


def _select_with_top_up(attn, image_positions, k, excluded) -> np.ndarray:
    """Fresh positions first; if fewer than k remain, refill from earlier picks by score.

    Keeps every block k wide, so the length law holds even when n * k > J.
    """
    fresh = [p for p in image_positions if int(p) not in excluded]
    picks = select_latent_vision(attn, fresh, k) if fresh else np.zeros(0, dtype=np.int64)
    if len(picks) < k and excluded:
        stale = [p for p in image_positions if int(p) in excluded]
        picks = np.concatenate([picks, select_latent_vision(attn, stale, k - len(picks))])
    return picks


@dataclass
class LatentState:
    """Working sequence plus latent-loop bookkeeping (0-based positions)."""

    seq: EmbeddedSeq
    latent_positions: list
    image_positions: np.ndarray
    base_len: int
    mode: str = "full"
    k: int = 4
    exclude_previous: bool = True
    step_index: int = 0
    selected: list = field(default_factory=list)  # per step: (B, k') int array
    latent_text_positions: list = field(default_factory=list)
    query_positions: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    forward_passes: int = 0

    @property
    def n_latent(self) -> int:
        return len(self.latent_positions)

    def expected_length(self) -> int:
        return self.base_len + self.step_index * block_size(self.mode, self.k)


def start_state(seq: EmbeddedSeq, params: Params, n_latent: int, k: int, mode: str = "full",
                exclude_previous: bool = True) -> LatentState:
    """Append ``n_latent`` placeholder slots to question+image embeddings."""
    if n_latent < 0:
        raise ValueError("n_latent must be non-negative")
    block_size(mode, k)
    base = len(seq)
    image_positions = seq.positions("image")
    if n_latent:
        ids = np.full((seq.batch, n_latent), vocab.LATENT_ID, dtype=np.int64)
        content = S.concat_rows([seq.content, token_embeddings(params, ids)])
        seq = EmbeddedSeq(content, list(seq.tags) + ["latent_text"] * n_latent)
    return LatentState(seq=seq, latent_positions=list(range(base, base + n_latent)),
                       image_positions=image_positions, base_len=len(seq), mode=mode, k=k,
                       exclude_previous=exclude_previous)


def latent_step(state: LatentState, params: Params, capture: bool = False) -> LatentState:
    """One pass of the latent loop; mutates and returns ``state``."""
    i = state.step_index
    if i >= state.n_latent:
        raise ValueError("all latent steps already taken")
    size = block_size(state.mode, state.k)
    if len(state.seq) + size > params.cfg.max_seq:
        raise CapacityError(f"latent block would exceed max_seq {params.cfg.max_seq}")
    l_i = state.latent_positions[i]
    prefix = S.slice_rows(state.seq.content, 0, l_i)
    trace = forward(params, prefix, need_logits=False)
    state.forward_passes += 1
    batch = state.seq.batch

    rows, tags = [], []
    if state.mode in ("full", "no_latent_vision"):
        rows.append(trace.last_hidden())
        tags.append("latent_text")
    elif state.mode == "no_latent_part":
        rows.append(token_embeddings(params, np.full((batch, 1), vocab.LATENT_ID, dtype=np.int64)))
        tags.append("latent_text")

    picks = np.zeros((batch, 0), dtype=np.int64)
    if state.mode in ("full", "no_latent_text") and state.k > 0:
        chosen = []
        for b in range(batch):
            excluded = set()
            if state.exclude_previous:
                for earlier in state.selected:
                    excluded.update(int(p) for p in earlier[b])
            chosen.append(_select_with_top_up(trace.attn_of(b), state.image_positions, state.k, excluded))
        width = min(len(c) for c in chosen)
        picks = np.stack([c[:width] for c in chosen])
        rows.append(S.embed_lookup(prefix, picks))
        tags.extend(["latent_vision"] * width)

    block = S.concat_rows(rows) if len(rows) > 1 else rows[0]
    grown = block.shape[-2]
    content = S.concat_rows([prefix, block, S.slice_rows(state.seq.content, l_i, len(state.seq))])
    if state.mode in ("full", "no_latent_vision"):
        state.latent_text_positions.append(l_i)
    state.query_positions.append(l_i - 1)
    state.seq = EmbeddedSeq(content, list(state.seq.tags[:l_i]) + tags + list(state.seq.tags[l_i:]))
    for n in range(i + 1, state.n_latent):
        state.latent_positions[n] += grown
    state.selected.append(picks)
    if capture:
        state.traces.append(trace)
    state.step_index += 1
    if grown == size and len(state.seq) != state.expected_length():
        raise AssertionError("length law violated")
    return state


def run_latent_phase(seq: EmbeddedSeq, params: Params, n_latent: int, k: int, mode: str = "full",
                     exclude_previous: bool = True, capture: bool = False) -> LatentState:
    state = start_state(seq, params, n_latent, k, mode, exclude_previous)
    for _ in range(n_latent):
        latent_step(state, params, capture=capture)
    return state


@dataclass
class RunRecord:
    """Outcome of one ``infer`` call."""

    sample_id: str
    n_latent: int
    emitted: list
    answer: list
    latent_passes: int
    decode_passes: int
    state: LatentState | None = None

    @property
    def ar_steps(self) -> int:
        return count_ar_steps(self)


def count_ar_steps(record: RunRecord) -> int:
    """One autoregressive step per latent pass plus one per emitted token."""
    return record.latent_passes + len(record.emitted)


def extract_answer(emitted: list) -> list:
    """Tokens after the last ``<step>`` with ``<eos>``/padding stripped."""
    ids = list(emitted)
    if vocab.STEP_ID in ids:
        ids = ids[len(ids) - ids[::-1].index(vocab.STEP_ID):]
    return [t for t in ids if t not in (vocab.EOS_ID, vocab.PAD_ID)]


def infer(sample, params: Params, n_latent: int, k: int, max_answer_len: int = 48, mode: str = "full",
          exclude_previous: bool = True, capture: bool = False) -> RunRecord:
    """Latent phase followed by greedy decoding of any remaining steps and the answer.

    ``n_latent`` saturates at the sample's own step count, as in training.
    """
    n = min(n_latent, sample.n_steps)
    seq = embed_inputs(params, [sample])
    state = run_latent_phase(seq, params, n, k, mode, exclude_previous, capture)
    room = params.cfg.max_seq - len(state.seq)
    emitted, passes = greedy_decode(params, state.seq, min(max_answer_len, room))
    return RunRecord(sample.id, n, emitted, extract_answer(emitted), state.forward_passes, passes,
                     state if capture else None)
