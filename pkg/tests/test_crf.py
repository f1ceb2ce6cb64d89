import itertools

import numpy as np
import pytest

from inferbeam.crf import (
    CrfParams, EnumerationBudgetExceeded, Evidence, PriorConfig, build_model, edge_potential_log, exact_marginals,
    exact_summary, gibbs_expectations, infer_marginals_exact, infer_marginals_lbp, joint_log_unnorm,
    node_potential_log, run_lbp, transfer_marginals,
)
from inferbeam.grid import build_grid, build_phop_table

from conftest import random_params


def brute_marginals(grid, table, params, ev, clamped=True):
    """Enumerate every labeling from the potential definitions directly."""
    V, L = grid.n_nodes, ev.n_labels
    m = params.edge_m(grid.n_edges)
    fixed = dict(zip(ev.nodes.tolist(), ev.labels.tolist())) if clamped else {}
    logp, states = [], []
    for x in itertools.product(range(L), repeat=V):
        if any(x[v] != l for v, l in fixed.items()):
            continue
        s = sum(node_potential_log(v, x[v], ev, params.w, grid, table) for v in range(V))
        s += sum(edge_potential_log(x[u], x[v], m[i]) for i, (u, v) in enumerate(grid.edges))
        logp.append(s)
        states.append(x)
    logp = np.array(logp)
    p = np.exp(logp - logp.max())
    p /= p.sum()
    marg = np.zeros((V, L))
    for pi, x in zip(p, states):
        marg[np.arange(V), x] += pi
    return marg


def test_node_and_joint_potentials(small_grid):
    g, t = small_grid
    ev = Evidence.of([0, 5], [1, 0], 2)
    p = CrfParams(np.array([1.0, 0.5, 0.25]), np.array([-2.0]), PriorConfig.flat(3), tied=True)
    # node 1 sits at rank 1 from node 0 and at rank 3 (sq 5) from node 5
    assert node_potential_log(1, 1, ev, p.w, g, t) == pytest.approx(1.0)
    assert node_potential_log(1, 0, ev, p.w, g, t) == pytest.approx(0.25)
    x = np.array([1, 1, 0, 0, 0, 0])
    expect = sum(node_potential_log(v, x[v], ev, p.w, g, t) for v in range(6)) + -2.0 * 2
    assert joint_log_unnorm(x, ev, p, g, t) == pytest.approx(expect)
    assert edge_potential_log(1, 1, -3.0) == 0.0


def test_exact_engines_match_brute_force(rng):
    for dims in [(3, 2, 1), (2, 2, 2), (4, 1, 1)]:
        g = build_grid(dims, 1.0)
        t = build_phop_table(g.dims, 3)
        for _ in range(3):
            L = int(rng.integers(2, 4))
            p = random_params(rng, 3, g.n_edges)
            nodes = rng.choice(g.n_nodes, 2, replace=False)
            ev = Evidence.of(nodes, rng.integers(0, L, 2), L)
            ref = brute_marginals(g, t, p, ev)
            model = build_model(g, t, p, ev)
            _, m1 = exact_marginals(model)
            lz, m2 = transfer_marginals(model)
            lz_e, _, _, _ = exact_summary(model)
            assert np.allclose(m1, ref, atol=1e-12)
            assert np.allclose(m2, ref, atol=1e-12)
            assert lz == pytest.approx(lz_e)


def test_lbp_exact_on_chain(rng):
    g = build_grid((6, 1, 1), 1.0)
    t = build_phop_table(g.dims, 3)
    for sched in ("flooding", "parity"):
        p = random_params(rng, 3, g.n_edges, scale=1.5)
        ev = Evidence.of([1, 4], [2, 0], 3)
        ref = infer_marginals_exact(ev, p, g, t).probs
        res = run_lbp(build_model(g, t, p, ev), damping=0.0, max_iters=500, tol=1e-12, schedule=sched)
        assert res.converged
        assert np.allclose(res.beliefs, ref, atol=1e-9)


@pytest.mark.parametrize("dims", [(4, 3, 2), (5, 4, 1), (1, 5, 3), (6, 1, 1)])
def test_lattice_and_edge_list_paths_agree(rng, dims):
    g = build_grid(dims, 1.0)
    t = build_phop_table(g.dims, 4)
    p = random_params(rng, 4, g.n_edges, tied=False, scale=0.7)
    ev = Evidence.of([0, 2, g.n_nodes - 1], [0, 1, 2], 5)
    for sched in ("flooding", "parity"):
        lat = build_model(g, t, p, ev, compress=True)
        gen = build_model(g, t, p, ev, compress=True)
        gen.edges = g.edges.copy()  # forces the general edge-list path
        a = run_lbp(lat, 0.3, 300, 1e-12, schedule=sched)
        b = run_lbp(gen, 0.3, 300, 1e-12, schedule=sched)
        assert a.iterations == b.iterations
        assert np.allclose(a.beliefs, b.beliefs, atol=1e-12)
        assert np.allclose(a.agree, b.agree, atol=1e-12)
        assert np.allclose(a.log_messages, b.log_messages, atol=1e-10)


def test_label_pooling_is_lossless(rng):
    g = build_grid((3, 3, 1), 1.0)
    t = build_phop_table(g.dims, 3)
    p = random_params(rng, 3, g.n_edges, tied=True)
    ev = Evidence.of([0, 8], [1, 4], 7)
    full = infer_marginals_lbp(ev, p, g, t, damping=0.2, tol=1e-12, max_iters=500, compress=False).probs
    pooled_model = build_model(g, t, p, ev, compress=True)
    assert pooled_model.n_cols == 3 and pooled_model.mult.tolist() == [1, 1, 5]
    pooled = infer_marginals_lbp(ev, p, g, t, damping=0.2, tol=1e-12, max_iters=500).probs
    assert np.allclose(full, pooled, atol=1e-9)
    assert np.allclose(pooled.sum(axis=1), 1.0)


def test_warm_start_reaches_same_fixed_point(rng):
    g = build_grid((4, 4, 1), 1.0)
    t = build_phop_table(g.dims, 3)
    p = random_params(rng, 3, g.n_edges, tied=True)
    model = build_model(g, t, p, Evidence.of([0, 15], [0, 1], 2))
    cold = run_lbp(model, 0.5, 500, 1e-12)
    warm = run_lbp(model, 0.5, 500, 1e-12, init_log_messages=cold.log_messages)
    assert warm.iterations < cold.iterations
    assert np.allclose(warm.beliefs, cold.beliefs, atol=1e-10)


def test_gibbs_statistics_match_exact(rng):
    g = build_grid((3, 2, 1), 1.0)
    t = build_phop_table(g.dims, 3)
    p = random_params(rng, 3, g.n_edges)
    D = rng.integers(0, 2, g.n_nodes)
    model = build_model(g, t, p, Evidence.full(D, 2), "training", with_counts=True)
    _, _, eu, dis = exact_summary(model)
    res = gibbs_expectations(model, n_chains=16, n_sweeps=1500, burn_in=100, seed=5)
    assert np.all(np.abs(res.eu - eu) <= 4 * res.eu_se + 1e-9)
    assert np.all(np.abs(res.dis - dis) <= 4 * res.dis_se + 1e-9)
    again = gibbs_expectations(model, n_chains=16, n_sweeps=1500, burn_in=100, seed=5)
    assert np.array_equal(res.eu, again.eu)


def test_evidence_and_budget_errors():
    with pytest.raises(ValueError):
        Evidence.of([0, 0], [1, 1], 2)
    with pytest.raises(ValueError):
        Evidence.of([0], [2], 2)
    with pytest.raises(ValueError):
        CrfParams(np.array([np.nan]), np.array([0.0]), PriorConfig.flat(1))
    g = build_grid((6, 6, 1), 1.0)
    t = build_phop_table(g.dims, 2)
    p = CrfParams(np.zeros(2), np.zeros(1), PriorConfig.flat(2), True)
    with pytest.raises(EnumerationBudgetExceeded):
        infer_marginals_exact(Evidence.of([0], [0], 9), p, g, t, budget=1000)
    with pytest.raises(ValueError):
        run_lbp(build_model(g, t, p, Evidence.of([0], [0], 2)), schedule="random")
