import numpy as np
import pytest

from ivtlr.model import ModelConfig
from ivtlr.tasks import Sample, generate_dataset

MICRO = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_seq=64, n_patches=4, default_k=2)


def micro_samples(n: int, seed: int = 0, steps: int = 3) -> list:
    """Real Grid-Sum text with the image cut down to the first four cells (J = 4)."""
    train, _ = generate_dataset(max(4 * n, 20), seed=seed)
    out = []
    for s in train:
        if s.n_steps == steps:
            out.append(Sample(s.id, s.question_tokens, s.grid[:4], s.rationale_steps, s.answer_tokens,
                              s.answer_label, s.answer_value, dict(s.meta)))
        if len(out) == n:
            break
    return out


@pytest.fixture(scope="session")
def micro_cfg():
    return MICRO


@pytest.fixture(scope="session")
def grid_data():
    return generate_dataset(200, seed=0)


def pick_indices(grad: np.ndarray, rng: np.random.Generator, top: int = 4, extra: int = 4) -> list:
    """Largest-|g| elements plus random ones carrying at least 1e-3 of the group's peak gradient."""
    flat = np.abs(grad.reshape(-1))
    if flat.max() == 0.0:
        return []
    order = np.argsort(-flat, kind="stable")
    chosen = list(order[:top])
    live = np.flatnonzero(flat >= 1e-3 * flat.max())
    rest = np.setdiff1d(live, chosen)
    if rest.size:
        chosen += list(rng.choice(rest, size=min(extra, rest.size), replace=False))
    return [int(i) for i in chosen]


ACCEPTANCE_LINES: list = []


def acceptance_line(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
