from __future__ import annotations

import numpy as np
import pytest

from probex.zoo import AlignSpec, TaskSpec, make_alignment_zoo, make_forest_zoo, make_multitree_zoo, make_tree_zoo

TINY = TaskSpec(
    dim=8,
    hidden=(12, 10),
    n_components=15,
    universe_size=10,
    pretrain_size=5,
    subset_size=5,
    samples_per_class=120,
    mean_scale=2.0,
)


@pytest.fixture(scope="session")
def tiny_spec():
    return TINY


@pytest.fixture(scope="session")
def tiny_tree():
    return make_tree_zoo(30, TINY, seed=3)


@pytest.fixture(scope="session")
def tiny_forest():
    return make_forest_zoo(12, TINY, seed=3)


@pytest.fixture(scope="session")
def tiny_multitree():
    return make_multitree_zoo(3, 36, TINY, seed=4)


@pytest.fixture(scope="session")
def tiny_align():
    aspec = AlignSpec(n_classes=10, n_holdout=3, embed_dim=6, models_per_class=4, lora_rank=2, steps_grid=(20, 30))
    return make_alignment_zoo(aspec, TINY, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` records and prints one verdict line."""

    def report(n: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
