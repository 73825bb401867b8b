import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from onestep.datasets import build_anchor, generate_mixture  # noqa: E402
from onestep.models import ModelSpec  # noqa: E402


def make_instance(family, K=3, n_pool=60, d=4, lam=0.1, n_anchor=30, noise=0.2, seed=0, sep=3.0):
    """Small (spec, pool, anchor) triple with disjoint ids."""
    data = generate_mixture(K, n_pool + n_anchor, d, sep, noise, seed)
    anchor, pool = build_anchor(data, n_anchor, "stratified", seed)
    return ModelSpec(family, K, d, lam), pool, anchor


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_acceptance(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
