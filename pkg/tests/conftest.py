import numpy as np
import pytest

from inferbeam.crf import CrfParams, PriorConfig
from inferbeam.grid import build_grid, build_phop_table

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_params(rng, K, n_edges, tied=False, scale=1.0):
    prior = PriorConfig(rng.normal(0, 1, K), rng.uniform(0.5, 2.0, K), float(rng.normal(-1, 0.5)), float(rng.uniform(0.5, 2.0)))
    w = rng.normal(0, scale, K)
    m = rng.normal(-0.5, scale, 1 if tied else n_edges)
    return CrfParams(w, m, prior, tied)


@pytest.fixture
def small_grid():
    g = build_grid((3, 2, 1), 1.0)
    return g, build_phop_table(g.dims, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
