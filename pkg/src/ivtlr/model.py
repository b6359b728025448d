"""Tiny decoder-only multimodal transformer.

Inputs are *content* embeddings: question-token embeddings, patch
embeddings standing in for a visual encoder, and (later) latent blocks.
``forward`` adds learned absolute position embeddings by index, runs pre-LN
causal blocks, and applies the final layer norm; ``hidden[n_layers]`` is that
normalized state and the logits are ``hidden[n_layers] @ W.T``.

Everything is batch-first: content has shape (B, T, d). Single-sample
helpers use B = 1.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import substrate as S
from . import vocab
from .substrate import Tensor

TAGS = ("text", "image", "latent_text", "latent_vision", "rationale", "answer")


class CapacityError(ValueError):
    """Sequence would exceed ``max_seq``."""


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = vocab.VOCAB_SIZE
    max_seq: int = 160
    n_patches: int = 16
    default_k: int = 4
    init_std: float = 0.02

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < vocab.VOCAB_SIZE:
            raise ValueError(f"vocab_size must cover the {vocab.VOCAB_SIZE} task tokens")
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "max_seq", "n_patches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.default_k < 0:
            raise ValueError("default_k must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class Params:
    """Ordered name -> Tensor map. Names are stable; checkpoints rely on the order."""

    def __init__(self, cfg: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self, dtype=None) -> "Params":
        out = OrderedDict()
        for name, t in self.tensors.items():
            data = t.data.astype(dtype or t.data.dtype, copy=True)
            out[name] = Tensor(data, requires_grad=t.requires_grad, name=name)
        return Params(self.cfg, out)

    def n_values(self) -> int:
        return sum(t.data.size for t in self)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, f = cfg.d_model, cfg.d_ff
    shapes = OrderedDict()
    shapes["tok_emb"] = (cfg.vocab_size, d)
    shapes["pos_emb"] = (cfg.max_seq, d)
    shapes["patch_digit"] = (10, d)
    shapes["patch_marker"] = (len(vocab.MARKERS), d)
    shapes["patch_cell"] = (cfg.n_patches, d)
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for w in ("q", "k", "v", "o"):
            shapes[p + f"w_{w}"] = (d, d)
            shapes[p + f"b_{w}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "w_1"] = (d, f)
        shapes[p + "b_1"] = (f,)
        shapes[p + "w_2"] = (f, d)
        shapes[p + "b_2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head"] = (cfg.vocab_size, d)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """GPT-2 style: N(0, init_std) everywhere, residual projections shrunk by sqrt(2L)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    std = cfg.init_std
    out = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        elif leaf in ("w_o", "w_2"):
            data = rng.normal(0.0, std / np.sqrt(2 * cfg.n_layers), shape)
        else:
            data = rng.normal(0.0, std, shape)
        out[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    return Params(cfg, out)


# ---------------------------------------------------------------------------
# embeddings


def token_embeddings(params: Params, ids) -> Tensor:
    """Content embeddings ``g(x)`` for an int array of shape (B, T)."""
    return S.embed_lookup(params["tok_emb"], np.asarray(ids, dtype=np.int64))


def patch_embeddings(params: Params, digits, markers) -> Tensor:
    """Patch vectors ``z_j`` for grids given as (B, J) digit and marker codes."""
    digits = np.asarray(digits, dtype=np.int64)
    markers = np.asarray(markers, dtype=np.int64)
    cells = np.broadcast_to(np.arange(digits.shape[-1]), digits.shape)
    z = S.add(S.embed_lookup(params["patch_digit"], digits), S.embed_lookup(params["patch_marker"], markers))
    return S.add(z, S.embed_lookup(params["patch_cell"], cells))


@dataclass
class EmbeddedSeq:
    """Content embeddings (B, T, d) plus one tag per position (shared by the batch)."""

    content: Tensor
    tags: list

    def __len__(self) -> int:
        return self.content.shape[-2]

    @property
    def batch(self) -> int:
        return self.content.shape[0]

    def positions(self, tag: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tags) if t == tag], dtype=np.int64)


def embed_inputs(params: Params, samples) -> EmbeddedSeq:
    """``[question embeddings][J patch embeddings]`` for a batch of same-length questions."""
    if not samples:
        raise ValueError("embed_inputs needs at least one sample")
    lengths = {len(s.question_tokens) for s in samples}
    if len(lengths) != 1:
        raise ValueError("batched samples must share the question length")
    n_q = lengths.pop()
    if n_q == 0:
        raise ValueError("empty question")
    cfg = params.cfg
    if any(len(s.grid) != cfg.n_patches for s in samples):
        raise ValueError(f"image must have exactly {cfg.n_patches} patches")
    if n_q + cfg.n_patches > cfg.max_seq:
        raise CapacityError(f"input length {n_q + cfg.n_patches} exceeds max_seq {cfg.max_seq}")
    ids = np.array([vocab.encode(s.question_tokens) for s in samples], dtype=np.int64)
    if ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")
    text = token_embeddings(params, ids)
    image = patch_embeddings(params, np.stack([s.digits() for s in samples]), np.stack([s.markers() for s in samples]))
    return EmbeddedSeq(S.concat_rows([text, image]), ["text"] * n_q + ["image"] * cfg.n_patches)


# ---------------------------------------------------------------------------
# forward


class ForwardTrace:
    """Per-layer hidden states, attention maps and logits from one forward pass.

    ``hidden[i]`` are graph tensors of shape (B, T, d); ``attn`` is a plain
    array of shape (B, n_layers, n_heads, T, T); ``logits`` is (B, T, V) or
    None when the head was skipped.
    """

    def __init__(self, hidden: list, attn: np.ndarray, logits: Tensor | None):
        self.hidden = hidden
        self.attn = attn
        self.logits = logits

    @property
    def length(self) -> int:
        return self.attn.shape[-1]

    def hidden_array(self, b: int = 0) -> np.ndarray:
        """(n_layers + 1, T, d) stack for one batch element."""
        return np.stack([h.data[b] for h in self.hidden])

    def attn_of(self, b: int = 0) -> np.ndarray:
        return self.attn[b]

    def last_hidden(self) -> Tensor:
        """Final-layer state at the last position, as a (B, 1, d) graph tensor."""
        h = self.hidden[-1]
        return S.slice_rows(h, h.shape[-2] - 1, h.shape[-2])


_counter = threading.local()


def forward_calls() -> int:
    """Number of ``forward`` invocations made on this thread so far."""
    return getattr(_counter, "n", 0)


def forward(params: Params, content: Tensor, need_logits: bool = True) -> ForwardTrace:
    cfg = params.cfg
    _counter.n = forward_calls() + 1
    if content.data.ndim != 3 or content.shape[-1] != cfg.d_model:
        raise S.DimensionError(f"forward expects (B, T, {cfg.d_model}), got {content.shape}")
    b, t, _ = content.shape
    if not 1 <= t <= cfg.max_seq:
        raise CapacityError(f"sequence length {t} outside 1..{cfg.max_seq}")
    pos = S.embed_lookup(params["pos_emb"], np.broadcast_to(np.arange(t), (b, t)))
    h = S.add(content, pos)
    hidden, attn = [h], []
    inv_sqrt = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        try:
            a = S.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"])
            q = S.split_heads(S.add(S.matmul(a, params[p + "w_q"]), params[p + "b_q"]), cfg.n_heads)
            k = S.split_heads(S.add(S.matmul(a, params[p + "w_k"]), params[p + "b_k"]), cfg.n_heads)
            v = S.split_heads(S.add(S.matmul(a, params[p + "w_v"]), params[p + "b_v"]), cfg.n_heads)
            weights = S.softmax_rows(S.scale(S.matmul(q, S.transpose(k)), inv_sqrt), causal=True)
            attn.append(weights.data)
            mixed = S.merge_heads(S.matmul(weights, v))
            h = S.add(h, S.add(S.matmul(mixed, params[p + "w_o"]), params[p + "b_o"]))
            m = S.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
            m = S.gelu(S.add(S.matmul(m, params[p + "w_1"]), params[p + "b_1"]))
            h = S.add(h, S.add(S.matmul(m, params[p + "w_2"]), params[p + "b_2"]))
        except S.NumericError as exc:
            raise S.NumericError(f"layer {i}: {exc}") from exc
        hidden.append(h)
    hidden[-1] = S.layer_norm(h, params["ln_f.g"], params["ln_f.b"])
    logits = S.matmul(hidden[-1], S.transpose(params["head"])) if need_logits else None
    return ForwardTrace(hidden, np.stack(attn, axis=1), logits)


def next_token_logits(trace: ForwardTrace, b: int = 0) -> np.ndarray:
    """Next-token distribution at the final position (float64, sums to 1)."""
    if trace.logits is None:
        raise ValueError("trace was computed without logits")
    z = trace.logits.data[b, -1].astype(np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


def greedy_decode(params: Params, prefix: EmbeddedSeq, max_len: int,
                  stop_id: int = vocab.EOS_ID) -> tuple[list[int], int]:
    """Append argmax tokens until ``<eos>`` or ``max_len``; returns (tokens, forward passes)."""
    if prefix.batch != 1:
        raise ValueError("greedy_decode runs one sample at a time")
    if len(prefix) + max_len > params.cfg.max_seq:
        raise CapacityError(f"prefix {len(prefix)} + {max_len} new tokens exceeds max_seq {params.cfg.max_seq}")
    content = prefix.content
    emitted: list[int] = []
    passes = 0
    table = params["tok_emb"].data
    while len(emitted) < max_len:
        trace = forward(params, content)
        passes += 1
        tok = int(np.argmax(trace.logits.data[0, -1]))
        emitted.append(tok)
        if tok == stop_id:
            break
        row = Tensor(table[tok][None, None, :])
        content = S.concat_rows([content, row])
    return emitted, passes
