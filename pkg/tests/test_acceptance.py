"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The slow studies share a condo parameter pair trained once per module.
"""
import time

import numpy as np
import pytest

from inferbeam.channel import ChannelParams, expected_rx_power
from inferbeam.cli import main
from inferbeam.crf import Evidence, build_model, exact_marginals, exact_summary, gibbs_expectations, run_lbp
from inferbeam.experiments import (
    ScenarioConfig, noise_robustness_study, run_alignment_study, run_blockage_study, train_family,
)
from inferbeam.grid import build_grid, build_phop_table
from inferbeam.training import Objective, TrainConfig, TrainingSet, prior_means

from conftest import ACCEPTANCE_LINES, random_params


def report(n, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}")
    return ok


# ---------------------------------------------------------------------------
# small random instances shared by criteria 1-3

DIMS = [(3, 3, 1), (3, 2, 1), (2, 2, 1), (3, 1, 1), (1, 3, 1)]


def make_instances(n=24, seed=2024):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        g = build_grid(DIMS[i % len(DIMS)], 1.0)
        K = int(rng.integers(1, 4))
        t = build_phop_table(g.dims, K)
        L = int(rng.integers(2, 4))
        tied = bool(i % 2)
        D = TrainingSet(rng.integers(0, L, (int(rng.integers(1, 4)), g.n_nodes)), L)
        p = random_params(rng, K, g.n_edges, tied=tied)
        evidence = "sampled" if i % 3 == 2 else "full"
        cfg = TrainConfig(engine="exact", evidence=evidence, sample_fraction=0.3, sample_draws=2, seed=i)
        out.append((g, t, D, p, Objective(D, g, t, p.prior, tied, cfg)))
    return out


@pytest.fixture(scope="module")
def instances():
    return make_instances()


def _central_fd(obj, p, h=1e-5):
    w, m = np.array(p.w, float), np.array(p.m, float)
    out = []
    for arr in (w, m):
        g = np.zeros_like(arr)
        for i in range(len(arr)):
            arr[i] += h
            up = obj.log_posterior(p.with_values(w, m))
            arr[i] -= 2 * h
            dn = obj.log_posterior(p.with_values(w, m))
            arr[i] += h
            g[i] = (up - dn) / (2 * h)
        out.append(g)
    return np.concatenate(out)


def test_criterion_01_gradient(instances):
    t0 = time.perf_counter()
    worst = 0.0
    for g, t, D, p, obj in instances:
        gw, gm = obj.gradient(p)
        an = np.concatenate([gw, gm])
        fd = _central_fd(obj, p)
        worst = max(worst, float(np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-8)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt <= 30 and len(instances) >= 20
    report(1, ok, f"{len(instances)} instances, max relative error {worst:.2e} (<= 1e-4), {dt:.1f} s")
    assert ok


def test_criterion_02_concavity(instances):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, probes = -np.inf, 0
    for g, t, D, p, obj in instances:
        # 25 endpoint pairs with 4 interior points each: 100 (a, b, t) probes
        for _ in range(25):
            a = random_params(rng, p.K, len(p.m), tied=p.tied, scale=2.0)
            b = random_params(rng, p.K, len(p.m), tied=p.tied, scale=2.0)
            fa, fb = obj.log_posterior(p.with_values(a.w, a.m)), obj.log_posterior(p.with_values(b.w, b.m))
            for s in rng.uniform(size=4):
                mid = p.with_values(s * a.w + (1 - s) * b.w, s * a.m + (1 - s) * b.m)
                worst = max(worst, s * fa + (1 - s) * fb - obj.log_posterior(mid))
                probes += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt <= 30
    report(2, ok, f"{probes} chord probes, max (chord - value) {worst:.2e} (<= 1e-9), {dt:.1f} s")
    assert ok


def test_criterion_03_inference_oracles(instances):
    worst_tv, worst_z, n_stats = 0.0, 0.0, 0
    for i, (g, t, D, p, obj) in enumerate(instances):
        rng = np.random.default_rng(100 + i)
        nodes = rng.choice(g.n_nodes, size=max(1, g.n_nodes // 3), replace=False)
        ev = Evidence.of(nodes, D.labelings[0, nodes], D.n_labels)
        model = build_model(g, t, p, ev)
        _, exact = exact_marginals(model)
        lbp = run_lbp(model, damping=0.5, max_iters=5000, tol=1e-12)
        worst_tv = max(worst_tv, float(0.5 * np.abs(lbp.beliefs - exact).sum(axis=1).max()))
        # sufficient statistics of the unclamped training model
        tm = build_model(g, t, p, Evidence.full(D.labelings[0], D.n_labels), "training", with_counts=True)
        _, _, eu, dis = exact_summary(tm)
        res = gibbs_expectations(tm, n_chains=64, n_sweeps=1200, burn_in=200, seed=i)
        for est, se, ref in ((res.eu, res.eu_se, eu), (res.dis, res.dis_se, dis)):
            z = np.abs(est - ref) / np.maximum(se, 1e-12)
            z[np.abs(est - ref) < 1e-12] = 0.0
            worst_z = max(worst_z, float(z.max()))
            n_stats += len(z)
    ok = worst_tv <= 0.01 and worst_z <= 3.0
    report(3, ok, f"LBP max node TV {worst_tv:.2e} (<= 0.01); Gibbs max |z| {worst_z:.2f} over {n_stats} statistics (<= 3)")
    assert ok


def test_criterion_04_expected_power_mixture():
    p = ChannelParams()
    rng = np.random.default_rng(44)
    n = 1_000_000
    worst = 0.0
    for kd in (1.0, 5.0, 20.0):
        for x_los, x_nlos in ((0.0, 0.0), (1.5, -4.0)):
            blocked = rng.uniform(size=n) < p.p_e * kd
            shadow = np.where(blocked, rng.normal(x_nlos, p.sigma_nlos, n), rng.normal(x_los, p.sigma_los, n))
            expo = np.where(blocked, p.n_nlos, p.n_los)
            pr = p.tx_power_dbm + p.g_tx_dbi + p.g_rx_dbi - p.pl_fs_d0 - 10 * expo * np.log10(kd) - shadow
            worst = max(worst, abs(float(pr.mean()) - float(expected_rx_power(kd, 1.0, p, x_los, x_nlos))))
            # same distance split into k cells of size d
            assert float(expected_rx_power(4, kd / 4, p, x_los, x_nlos)) == pytest.approx(float(expected_rx_power(kd, 1.0, p, x_los, x_nlos)))
    ok = worst <= 0.05
    report(4, ok, f"Monte Carlo ({n} draws per point) vs closed form, max gap {worst:.4f} dB (<= 0.05)")
    assert ok


def test_criterion_05_priors():
    import math

    def q(x):
        return 0.5 * math.erfc(x / math.sqrt(2))

    worst, decreasing = 0.0, True
    for K in range(2, 11):
        mu_w, _ = prior_means(K)
        for k in range(1, K + 1):
            ref = sum(math.log(q(12.0 * math.log10(k / j) / (1.8 * math.sqrt(2)))) for j in range(1, K + 1) if j != k)
            worst = max(worst, abs(mu_w[k - 1] - ref))
        decreasing &= bool(np.all(np.diff(mu_w) < 0))
    two = prior_means(2)[0]
    near = abs(two[0] + 0.0811) < 5e-5 and abs(two[1] + 2.552) < 5e-4
    ok = worst <= 1e-10 and decreasing and near
    report(5, ok, f"max |mu_w - Q oracle| {worst:.1e}; strictly decreasing for K<=10: {decreasing}; "
                  f"K=2 -> ({two[0]:.4f}, {two[1]:.3f})")
    assert ok


# ---------------------------------------------------------------------------
# condo studies

CONDO = ScenarioConfig()  # 1% sampling, 1000 UEs per seed, seeds 0-4, delta 1 m


@pytest.fixture(scope="module")
def condo_theta():
    t0 = time.perf_counter()
    r1, r2 = train_family(CONDO, CONDO.train_seed)
    return (r1.params, r2.params), time.perf_counter() - t0


@pytest.fixture(scope="module")
def condo_alignment(condo_theta):
    theta, t_train = condo_theta
    t0 = time.perf_counter()
    res = run_alignment_study(CONDO, theta, deltas=[1.0])
    return res, t_train + time.perf_counter() - t0


@pytest.fixture(scope="module")
def condo_deltas(condo_theta, condo_alignment):
    theta, _ = condo_theta
    res = run_alignment_study(CONDO, theta, deltas=[0.0, 0.5, 2.0])
    # the delta = 1 run uses the same UE draws and initial samples, so it pairs with these
    return res.sessions + condo_alignment[0].sessions


def test_criterion_06_alignment_accuracy(condo_alignment):
    res, dt = condo_alignment
    s = res.summary["1"]
    ok = s["within_6"] >= 0.90 and s["sls_rate"] <= 0.10 and dt <= 300 and len(CONDO.seeds) >= 5
    report(6, ok, f"condo, {s['sessions']} sessions over {len(CONDO.seeds)} seeds: within 6 trials {s['within_6']:.3f} "
                  f"(>= 0.90), SLS rate {s['sls_rate']:.3f} (<= 0.10), {dt:.0f} s incl. training (<= 300)")
    assert ok


def test_criterion_07_localization_monotone(condo_deltas):
    rows = condo_deltas
    by = {}
    for r in rows:
        by.setdefault(r["delta_m"], []).append(r)
    deltas = sorted(by)
    for d in deltas:
        by[d].sort(key=lambda r: (r["seed"], r["env"], r["session"]))
    paired = all([r["true_node"] for r in by[d]] == [r["true_node"] for r in by[deltas[0]]] for d in deltas)
    means = [float(np.mean([r["n_trials"] for r in by[d]])) for d in deltas]
    ok = paired and deltas == [0.0, 0.5, 1.0, 2.0] and all(b >= a for a, b in zip(means, means[1:]))
    report(7, ok, "mean trials by delta " + ", ".join(f"{d:g} m: {m:.2f}" for d, m in zip(deltas, means)) + f"; paired: {paired}")
    assert ok


def test_criterion_08_blockage_recovery(condo_theta):
    theta, _ = condo_theta
    res = run_blockage_study(CONDO, theta)
    s = res.summary
    ok = s["affected"] > 0 and s["within_1"] >= 0.70 and s["within_4"] >= 0.85
    report(8, ok, f"{s['affected']} affected sessions over {len(CONDO.seeds)} seeds: 1 extra trial {s['within_1']:.3f} "
                  f"(>= 0.70), within 4 {s['within_4']:.3f} (>= 0.85)")
    assert ok


def test_sector_weights_decay_faster(condo_theta):
    (t_bs, t_sec), _ = condo_theta
    # relative drop from rank 1 to rank 2: sector labels change over shorter distances
    assert t_sec.w[1] / t_sec.w[0] <= t_bs.w[1] / t_bs.w[0]


def test_criterion_09_latency_formulas(condo_deltas):
    c = CONDO.constants()
    n_sec = CONDO.template.n_sec
    sls = (n_sec + n_sec) * c.t_frame_ms
    bad = 0
    for r in condo_deltas:
        ib = c.t_loc_ms + 2 * r["n_trials"] * c.t_frame_ms + c.t_brp_ms + (sls if r["sls"] else 0.0)
        tr = c.t_beacon_ms + 2 * n_sec * c.t_frame_ms + c.t_brp_ms
        bad += r["elapsed_ms"] != ib or r["traditional_ms"] != tr
    n_sls = sum(r["sls"] for r in condo_deltas)
    ok = bad == 0
    report(9, ok, f"{len(condo_deltas)} sessions, {bad} mismatches ({n_sls} fallback sessions carry the SLS term)")
    assert ok


NOISE = ScenarioConfig(seeds=(0, 1, 2))


def test_criterion_10_noise_robustness():
    res = noise_robustness_study(NOISE)
    rows = [r for r in res.sessions if r["exp_w_clean"] > 0.1]
    worst = max(rows, key=lambda r: r["rel_change"])
    flips = sorted({(round(r["flip_bs"], 3), round(r["flip_sec"], 3)) for r in res.sessions})
    ok = worst["rel_change"] <= 0.25 and len(NOISE.seeds) >= 3
    report(10, ok, f"{len(rows)} weights with exp(w) > 0.1 over {len(NOISE.seeds)} seeds, max relative change "
                   f"{worst['rel_change']:.3f} (<= 0.25) at seed {worst['seed']} {worst['crf']} k={worst['k']}; flips {flips}")
    assert ok


def test_criterion_11_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("INFERBEAM_OUTPUT", str(tmp_path))
    flags = ["--family", "toy", "--seeds", "0", "1", "2", "--n-train", "4", "--n-test", "2", "--train-subset", "2",
             "--max-iters", "20", "--n-ues", "100", "--n-blockages", "10", "--sessions-per-blockage", "30"]
    names = ["alignment_sessions.csv", "blockage_sessions.csv", "noise_params.csv", "summary.json"]
    main(["simulate"] + flags + ["--study", "all", "--deltas", "0", "1", "--out", "a"])
    main(["simulate"] + flags + ["--study", "all", "--deltas", "0", "1", "--out", "b"])
    main(["simulate"] + flags + ["--study", "all", "--deltas", "0", "1", "--out", "c", "--workers", "2"])
    main(["train"] + flags + ["--out", "t1"])
    main(["train"] + flags + ["--out", "t2"])
    same = all((tmp_path / d / n).read_bytes() == (tmp_path / "a" / n).read_bytes() for d in ("b", "c") for n in names)
    same &= all((tmp_path / "t1" / n).read_bytes() == (tmp_path / "t2" / n).read_bytes()
                for n in ("theta_bs.txt", "theta_sec.txt", "training_history.csv"))
    report(11, same, "simulate (all studies) reruns and 1 vs 2 workers, and train reruns: byte-identical outputs")
    assert same
