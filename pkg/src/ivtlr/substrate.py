"""Small reverse-mode autodiff engine over numpy arrays.

Activations and parameters are stored as float32; reductions (dot products,
softmax normalizers, layer-norm moments, loss sums) run in float64 and are
cast back. Tensors holding float64 data stay float64 end to end, which is
what the finite-difference checker relies on.

Ops are recorded onto the innermost active :class:`Graph` (a context
manager). Outside a graph nothing is taped, which is how inference runs.

Row convention: the last axis is features, the second-to-last axis is rows
(sequence positions). Any leading axes are batch/head axes and must match
exactly between operands; the only broadcast allowed is adding a 1-D bias
row, or multiplying by a shared 2-D weight matrix.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-5
_F64 = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class ContractError(ValueError):
    """A caller broke an op precondition."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("kind", "inputs", "out", "ctx", "attrs")

    def __init__(self, kind, inputs, out, ctx, attrs):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.ctx = ctx
        self.attrs = attrs


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "graphs"):
        _state.graphs = []
    return _state.graphs


class Graph:
    """Tape of executed ops, in execution order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# op table

_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _register(name: str):
    def deco(cls):
        _FORWARD[name] = cls.forward
        _BACKWARD[name] = cls.backward
        return cls

    return deco


def op_kinds() -> list[str]:
    return sorted(_FORWARD)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _fold_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over leading axes so it matches a shared operand."""
    if grad.shape == shape:
        return grad
    return grad.reshape(-1, *shape).sum(axis=0)


@_register("matmul")
class _MatMul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")
        if a.ndim == 2 and b.ndim > 2:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        out = np.matmul(a.astype(_F64, copy=False), b.astype(_F64, copy=False))
        return out, None

    @staticmethod
    def backward(g, a, b, ctx):
        a64 = a.astype(_F64, copy=False)
        b64 = b.astype(_F64, copy=False)
        ga = np.matmul(g, _swap(b64))
        if b.ndim == 2 and a.ndim > 2:
            gb = a64.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(_swap(a64), g)
        return ga, gb


@_register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape and not (b.ndim == 1 and b.shape[0] == a.shape[-1]):
            raise DimensionError(f"add: {a.shape} + {b.shape}")
        return a + b, None

    @staticmethod
    def backward(g, a, b, ctx):
        return g, _fold_to(g, b.shape)


@_register("scale")
class _Scale:
    @staticmethod
    def forward(a, factor: float):
        return a * a.dtype.type(factor), None

    @staticmethod
    def backward(g, a, ctx, factor: float):
        return (g * factor,)


def _causal_mask(rows: int, cols: int) -> np.ndarray:
    # query q sees keys 0..q; with cols > rows the queries are the last rows
    offset = cols - rows
    return np.triu(np.ones((rows, cols), dtype=bool), k=1 + offset)


@_register("softmax_rows")
class _Softmax:
    @staticmethod
    def forward(a, causal: bool = False):
        x = a.astype(_F64)
        if causal:
            if a.shape[-1] < a.shape[-2]:
                raise DimensionError(f"causal softmax needs cols >= rows, got {a.shape}")
            x[..., _causal_mask(a.shape[-2], a.shape[-1])] = -np.inf
        x -= x.max(axis=-1, keepdims=True)
        np.exp(x, out=x)
        x /= x.sum(axis=-1, keepdims=True)
        return x, x

    @staticmethod
    def backward(g, a, y, causal: bool = False):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@_register("layer_norm")
class _LayerNorm:
    @staticmethod
    def forward(x, gamma=None, beta=None):
        if gamma is not None and gamma.shape != (x.shape[-1],):
            raise DimensionError(f"layer_norm gain {gamma.shape} for {x.shape}")
        if beta is not None and beta.shape != (x.shape[-1],):
            raise DimensionError(f"layer_norm bias {beta.shape} for {x.shape}")
        x64 = x.astype(_F64, copy=False)
        mu = x64.mean(axis=-1, keepdims=True)
        xc = x64 - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
        xhat = xc * inv
        out = xhat
        if gamma is not None:
            out = out * gamma
        if beta is not None:
            out = out + beta
        return out, (xhat, inv)

    @staticmethod
    def backward(g, x, *rest):
        *params, (xhat, inv) = rest
        gamma = params[0] if params else None
        gx_hat = g * gamma if gamma is not None else g
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if len(params) >= 1:
            grads.append(_fold_to(g * xhat, params[0].shape))
        if len(params) >= 2:
            grads.append(_fold_to(g, params[1].shape))
        return tuple(grads)


_GELU_C = np.sqrt(2.0 / np.pi)


@_register("gelu")
class _Gelu:
    # tanh approximation
    @staticmethod
    def forward(a):
        x2 = a * a
        t = np.tanh(a * (_GELU_C + (_GELU_C * 0.044715) * x2).astype(a.dtype))
        return 0.5 * a * (1.0 + t), (t, x2)

    @staticmethod
    def backward(g, a, ctx):
        t, x2 = ctx
        dt = (1.0 - t * t) * (_GELU_C + (3 * _GELU_C * 0.044715) * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)


@_register("embed_lookup")
class _EmbedLookup:
    """Row gather: ``table[ids]`` for a 2-D table, or per-batch rows of a 3-D table."""

    @staticmethod
    def forward(table, ids):
        ids = np.asarray(ids)
        if ids.dtype.kind not in "iu":
            raise ContractError("embed_lookup ids must be integers")
        if table.ndim == 2:
            if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
                raise DimensionError(f"embed_lookup id out of range for {table.shape[0]} rows")
            return table[ids], None
        if table.ndim == 3 and ids.ndim == 2 and ids.shape[0] == table.shape[0]:
            if ids.size and (ids.min() < 0 or ids.max() >= table.shape[1]):
                raise DimensionError(f"embed_lookup id out of range for {table.shape[1]} rows")
            return table[np.arange(table.shape[0])[:, None], ids], None
        raise DimensionError(f"embed_lookup: table {table.shape} with ids {ids.shape}")

    @staticmethod
    def backward(g, table, ctx, ids):
        ids = np.asarray(ids)
        gt = np.zeros(table.shape, dtype=_F64)
        if table.ndim == 2:
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        else:
            np.add.at(gt, (np.arange(table.shape[0])[:, None], ids), g)
        return (gt,)


@_register("concat_rows")
class _ConcatRows:
    @staticmethod
    def forward(*parts):
        ref = parts[0].shape
        for p in parts[1:]:
            if p.ndim != len(ref) or p.shape[:-2] != ref[:-2] or p.shape[-1] != ref[-1]:
                raise DimensionError(f"concat_rows: {ref} with {p.shape}")
        sizes = [p.shape[-2] for p in parts]
        return np.concatenate(parts, axis=-2), sizes

    @staticmethod
    def backward(g, *rest):
        sizes = rest[-1]
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=-2))


@_register("slice_rows")
class _SliceRows:
    @staticmethod
    def forward(a, start: int, stop: int):
        if not 0 <= start <= stop <= a.shape[-2]:
            raise DimensionError(f"slice_rows [{start}:{stop}] of {a.shape}")
        return a[..., start:stop, :], None

    @staticmethod
    def backward(g, a, ctx, start: int, stop: int):
        ga = np.zeros(a.shape, dtype=_F64)
        ga[..., start:stop, :] = g
        return (ga,)


@_register("transpose")
class _Transpose:
    @staticmethod
    def forward(a):
        if a.ndim < 2:
            raise DimensionError(f"transpose of {a.shape}")
        return _swap(a), None

    @staticmethod
    def backward(g, a, ctx):
        return (_swap(g),)


@_register("split_heads")
class _SplitHeads:
    """``(..., T, H*dh) -> (..., H, T, dh)``."""

    @staticmethod
    def forward(a, n_heads: int):
        if a.shape[-1] % n_heads:
            raise DimensionError(f"split_heads: width {a.shape[-1]} over {n_heads} heads")
        lead, t, d = a.shape[:-2], a.shape[-2], a.shape[-1]
        out = a.reshape(*lead, t, n_heads, d // n_heads)
        return np.swapaxes(out, -2, -3), None

    @staticmethod
    def backward(g, a, ctx, n_heads: int):
        return (np.swapaxes(g, -2, -3).reshape(a.shape),)


@_register("merge_heads")
class _MergeHeads:
    @staticmethod
    def forward(a):
        if a.ndim < 3:
            raise DimensionError(f"merge_heads of {a.shape}")
        out = np.swapaxes(a, -2, -3)
        return out.reshape(*out.shape[:-2], -1), None

    @staticmethod
    def backward(g, a, ctx):
        lead = a.shape[:-3]
        h, t, dh = a.shape[-3:]
        return (np.swapaxes(g.reshape(*lead, t, h, dh), -2, -3),)


@_register("sum")
class _Sum:
    @staticmethod
    def forward(a):
        return np.asarray(a.astype(_F64, copy=False).sum()), None

    @staticmethod
    def backward(g, a, ctx):
        return (np.broadcast_to(g, a.shape).astype(_F64),)


@_register("nll")
class _MaskedNLL:
    """Mean negative log-likelihood of ``targets`` over rows where ``mask`` holds."""

    @staticmethod
    def forward(logits, targets, mask):
        targets = np.asarray(targets)
        mask = np.asarray(mask, dtype=bool)
        if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
            raise DimensionError(f"nll: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
        count = int(mask.sum())
        if count == 0:
            raise ContractError("nll: no supervised positions")
        x = logits.astype(_F64)
        x -= x.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(x).sum(axis=-1))
        picked = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
        loss = ((logz - picked) * mask).sum() / count
        return np.asarray(loss), (x, logz, count)

    @staticmethod
    def backward(g, logits, ctx, targets, mask):
        x, logz, count = ctx
        targets = np.asarray(targets)
        p = np.exp(x - logz[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        p *= np.asarray(mask, dtype=_F64)[..., None] * (float(g) / count)
        return (p,)


# ---------------------------------------------------------------------------


def apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run one op, recording it on the active graph when gradients are needed."""
    try:
        fwd = _FORWARD[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    datas = [t.data for t in inputs]
    with np.errstate(over="ignore", invalid="ignore"):
        out, ctx = fwd(*datas, **attrs)
        # cast before checking: float64 internals can overflow float32 storage
        out = np.asarray(out).astype(_result_dtype(datas), copy=False)
        # the sum is finite whenever every element is; scan fully only otherwise
        bad = not np.isfinite(out.sum()) and not np.isfinite(out).all()
    if bad:
        raise NumericError(f"{kind} produced non-finite values")
    rg = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=rg)
    graph = active_graph()
    if graph is not None and rg:
        graph.nodes.append(Node(kind, list(inputs), result, ctx, attrs))
    return result


def _result_dtype(datas) -> type:
    return np.float64 if any(d.dtype == np.float64 for d in datas) else np.float32


def backward(loss: Tensor, graph: Graph | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns ``{id(tensor): gradient}`` for every tensor on the tape that the
    loss depends on; leaf tensors (parameters) also get ``.grad`` set.
    Use :func:`grad_of` to read the map with a zero default.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else active_graph()
    if graph is None or not graph.nodes:
        raise ContractError("backward on an empty graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=_F64)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        produced.add(id(node.out))
        g = grads.get(id(node.out))
        if g is None:
            continue
        datas = [t.data for t in node.inputs]
        in_grads = _BACKWARD[node.kind](g, *datas, node.ctx, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=_F64)
            leaves[key] = t
    for key, t in leaves.items():
        if key not in produced:
            t.grad = grads[key].astype(t.data.dtype)
    return grads


def grad_of(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    g = grads.get(id(t))
    return np.zeros(t.shape, dtype=_F64) if g is None else g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, *,
               indices: Sequence[int] | None = None) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` maps the tensor to a scalar tensor. Both routes run in float64: the
    data of ``x`` is promoted for the duration of the check and restored
    afterwards. ``indices`` limits the comparison to selected flat elements.
    """
    if not h > 0:
        raise ContractError(f"grad_check step must be positive, got {h}")
    original = x.data
    x.data = original.astype(_F64)
    try:
        with Graph() as g:
            loss = f(x)
            if not np.isfinite(loss.data).all():
                raise NumericError("grad_check: f returned non-finite value")
            analytic = grad_of(backward(loss, g), x).reshape(-1)
        flat = x.data.reshape(-1)
        picks = range(flat.size) if indices is None else indices
        worst = 0.0
        for i in picks:
            keep = flat[i]
            flat[i] = keep + h
            up = float(f(x).data)
            flat[i] = keep - h
            down = float(f(x).data)
            flat[i] = keep
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("grad_check: f returned non-finite value")
            numeric = (up - down) / (2 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
        return worst
    finally:
        x.data = original


# thin helpers so model code reads like math


def matmul(a, b):
    return apply("matmul", [a, b])


def add(a, b):
    return apply("add", [a, b])


def scale(a, factor: float):
    return apply("scale", [a], factor=float(factor))


def softmax_rows(a, causal: bool = False):
    return apply("softmax_rows", [a], causal=causal)


def layer_norm(x, gamma=None, beta=None):
    return apply("layer_norm", [t for t in (x, gamma, beta) if t is not None])


def gelu(a):
    return apply("gelu", [a])


def embed_lookup(table, ids):
    return apply("embed_lookup", [table], ids=np.asarray(ids))


def concat_rows(parts):
    return apply("concat_rows", list(parts))


def slice_rows(a, start: int, stop: int):
    return apply("slice_rows", [a], start=int(start), stop=int(stop))


def transpose(a):
    return apply("transpose", [a])


def split_heads(a, n_heads: int):
    return apply("split_heads", [a], n_heads=int(n_heads))


def merge_heads(a):
    return apply("merge_heads", [a])


def total(a):
    return apply("sum", [a])


def nll(logits, targets, mask):
    return apply("nll", [logits], targets=np.asarray(targets), mask=np.asarray(mask, dtype=bool))
