import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pmcrossover.model import PairRecord
from pmcrossover.patterns import Sequence, position_mask

DATA = Path(__file__).parent / "data"


def random_pd(rng, scale=1.0):
    A = rng.normal(size=(4, 4))
    return scale * (A @ A.T / 4 + np.eye(4))


def make_records(rng, cells, sigma, means_of=None):
    """One record per (pattern, sequence) entry in ``cells``; values ~ N(mean, sigma)."""
    out = []
    for j, (p, s) in enumerate(cells):
        mean = means_of(p, s) if means_of else rng.normal(size=4) * 0.5
        y = rng.multivariate_normal(mean, sigma)
        m = position_mask(p, s)
        out.append(PairRecord(j + 1, s, tuple(float(v) if k else None for v, k in zip(y, m))))
    return out


# 20 pairs, three full-rank groups under the default scheme
MIXED_20 = (
    [(0, s) for s in Sequence for _ in range(6)]
    + [(p, s) for p in (1, 2) for s in Sequence]
    + [(p, s) for p in (4, 5) for s in Sequence]
)


def mixed_instance(rng):
    return make_records(rng, MIXED_20, random_pd(rng))


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
