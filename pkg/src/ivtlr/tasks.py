"""Grid-Sum: a synthetic multimodal multi-hop benchmark.

Each image is a 4x4 grid of cells, each cell holding a digit and a marker
(plain, start, or an arrow). Cells are named by their row-major index
0..15. The question names the start cell, the direction of the first hop
and the number of hops; every later hop follows the arrow printed in the
current cell. One hop of the rationale reads
``[cell, digit, direction, next cell, next digit, running sum]``.

The answer is the option letter whose value equals the sum of all visited
digits (start cell included). Options are four consecutive integers around
the true sum, so the text alone carries no usable signal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import vocab

GRID_SIDE = 4
N_PATCHES = GRID_SIDE * GRID_SIDE
MAX_STEPS = 3
MAX_HOPS = 4  # (hops + 1) * 9 + 3 must stay inside the number vocabulary

_MOVES = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


class TaskSpecError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    question_tokens: list[str]
    grid: list[tuple[int, str]]
    rationale_steps: list[list[str]]
    answer_tokens: list[str]
    answer_label: str
    answer_value: int
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.rationale_steps)

    def digits(self) -> np.ndarray:
        return np.array([d for d, _ in self.grid], dtype=np.int64)

    def markers(self) -> np.ndarray:
        return np.array([vocab.MARKER_CODE[m] for _, m in self.grid], dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "question_tokens": list(self.question_tokens),
            "grid": [[d, m] for d, m in self.grid],
            "rationale_steps": [list(s) for s in self.rationale_steps],
            "answer_tokens": list(self.answer_tokens),
            "answer_label": self.answer_label,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Sample":
        expected = {"id", "question_tokens", "grid", "rationale_steps", "answer_tokens", "answer_label", "meta"}
        if set(obj) != expected:
            raise ValueError(f"sample fields {sorted(obj)} != {sorted(expected)}")
        grid = [(int(d), str(m)) for d, m in obj["grid"]]
        if len(grid) != N_PATCHES:
            raise ValueError(f"grid must have {N_PATCHES} cells")
        return cls(
            id=obj["id"],
            question_tokens=list(obj["question_tokens"]),
            grid=grid,
            rationale_steps=[list(s) for s in obj["rationale_steps"]],
            answer_tokens=list(obj["answer_tokens"]),
            answer_label=obj["answer_label"],
            answer_value=int(obj["meta"]["answer_value"]),
            meta=dict(obj["meta"]),
        )


def segment_rationale(native_steps: list, max_steps: int = MAX_STEPS) -> list:
    """Merge adjacent native steps into at most ``max_steps`` contiguous groups.

    Group sizes differ by at most one, larger groups first. Steps are token
    lists; a merged group is the concatenation of its members.
    """
    n = len(native_steps)
    if n <= max_steps:
        return [list(s) for s in native_steps]
    base, extra = divmod(n, max_steps)
    merged, at = [], 0
    for g in range(max_steps):
        size = base + (1 if g < extra else 0)
        group = []
        for s in native_steps[at:at + size]:
            group.extend(s)
        merged.append(group)
        at += size
    return merged


def _cell(r: int, c: int) -> int:
    return r * GRID_SIDE + c


def _random_path(rng: np.random.Generator, hops: int) -> tuple[list[int], list[str]]:
    while True:
        r, c = divmod(int(rng.integers(N_PATCHES)), GRID_SIDE)
        path, dirs = [_cell(r, c)], []
        for _ in range(hops):
            options = []
            for name in vocab.DIRECTIONS:
                dr, dc = _MOVES[name]
                nr, nc = r + dr, c + dc
                if 0 <= nr < GRID_SIDE and 0 <= nc < GRID_SIDE and _cell(nr, nc) not in path:
                    options.append(name)
            if not options:
                break
            name = options[int(rng.integers(len(options)))]
            dr, dc = _MOVES[name]
            r, c = r + dr, c + dc
            path.append(_cell(r, c))
            dirs.append(name)
        if len(dirs) == hops:
            return path, dirs


def walk(grid: list[tuple[int, str]], first_direction: str, hops: int) -> list[int]:
    """Cells visited from the start marker: first hop given, then follow arrows."""
    starts = [i for i, (_, m) in enumerate(grid) if m == "start"]
    if len(starts) != 1:
        raise ValueError("grid must have exactly one start cell")
    cell, direction = starts[0], first_direction
    visited = [cell]
    for _ in range(hops):
        r, c = divmod(cell, GRID_SIDE)
        dr, dc = _MOVES[direction]
        r, c = r + dr, c + dc
        if not (0 <= r < GRID_SIDE and 0 <= c < GRID_SIDE):
            raise ValueError("path leaves the grid")
        cell = _cell(r, c)
        visited.append(cell)
        direction = grid[cell][1]
    return visited


def make_sample(index: int, hops: int, seed: int) -> Sample:
    rng = np.random.default_rng([seed, index])
    path, dirs = _random_path(rng, hops)
    arrows = vocab.DIRECTIONS
    grid_markers = [("plain" if rng.random() < 0.25 else arrows[int(rng.integers(4))]) for _ in range(N_PATCHES)]
    digits = [int(d) for d in rng.integers(0, 10, size=N_PATCHES)]
    grid_markers[path[0]] = "start"
    for i in range(1, hops):
        grid_markers[path[i]] = dirs[i]
    grid = list(zip(digits, grid_markers))

    native, running = [], digits[path[0]]
    for i in range(hops):
        a, b = path[i], path[i + 1]
        running += digits[b]
        native.append([str(a), str(digits[a]), dirs[i], str(b), str(digits[b]), str(running)])
    total = running

    low = int(rng.integers(max(0, total - 3), min(total, vocab.MAX_NUMBER - 3) + 1))
    values = [low + j for j in range(4)]
    order = rng.permutation(4)
    options = [values[j] for j in order]
    label = vocab.LETTERS[options.index(total)]

    question = [vocab.BOS, "start", str(path[0]), dirs[0], "hops", str(hops)]
    for letter, value in zip(vocab.LETTERS, options):
        question += [letter, str(value)]
    return Sample(
        id=f"gs{index:06d}",
        question_tokens=question,
        grid=grid,
        rationale_steps=segment_rationale(native, MAX_STEPS),
        answer_tokens=[label],
        answer_label=label,
        answer_value=total,
        meta={"n_native_steps": hops, "difficulty": hops, "answer_value": total},
    )


def _split_key(seed: int, sample_id: str) -> str:
    return hashlib.sha256(f"{seed}:{sample_id}".encode()).hexdigest()


def generate_dataset(n_samples: int, hop_count: int = 3, seed: int = 0,
                     short_rationale_fraction: float = 0.2,
                     test_fraction: float = 0.2) -> tuple[list[Sample], list[Sample]]:
    """Build ``n_samples`` instances and split them by a seeded hash of the id.

    A fixed ``round(short_rationale_fraction * n)`` of the samples get 1 or 2
    hops, which keeps short rationales in the mix. Both splits come back
    sorted by id.
    """
    if n_samples <= 0:
        raise TaskSpecError("n_samples must be positive")
    if not 1 <= hop_count <= MAX_HOPS:
        raise TaskSpecError(f"hop_count must be in 1..{MAX_HOPS}")
    if not 0.0 <= short_rationale_fraction <= 1.0:
        raise TaskSpecError("short_rationale_fraction must be in [0, 1]")
    n_short = int(round(short_rationale_fraction * n_samples))
    short = set(np.random.default_rng([seed, 1]).permutation(n_samples)[:n_short].tolist())
    samples = []
    for i in range(n_samples):
        hops = hop_count
        if i in short:
            hops = 1 + int(np.random.default_rng([seed, i, 2]).integers(2))
        samples.append(make_sample(i, hops, seed))
    ranked = sorted(samples, key=lambda s: _split_key(seed, s.id))
    n_test = int(round(test_fraction * n_samples))
    test = sorted(ranked[:n_test], key=lambda s: s.id)
    train = sorted(ranked[n_test:], key=lambda s: s.id)
    return train, test


def dumps_jsonl(samples: list[Sample]) -> str:
    return "".join(json.dumps(s.to_json(), sort_keys=True) + "\n" for s in samples)


def load_jsonl(path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Sample.from_json(json.loads(line)))
    return out


def render_image(sample_or_grid, params):
    """Patch embeddings for one grid: digit + marker + cell-slot vectors, shape (J, d)."""
    from .model import patch_embeddings

    grid = sample_or_grid.grid if isinstance(sample_or_grid, Sample) else sample_or_grid
    digits = np.array([[d for d, _ in grid]], dtype=np.int64)
    markers = np.array([[vocab.MARKER_CODE[m] for _, m in grid]], dtype=np.int64)
    return patch_embeddings(params, digits, markers)
