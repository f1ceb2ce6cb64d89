"""Evaluation pipeline: synthetic floor plans, training, alignment and blockage studies.

Everything is a pure function of the scenario config and its seeds. Work
fans out over (seed, environment) tasks and results are merged in key
order, so outputs do not depend on the worker count.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import BaseStation, Box, ChannelParams, Environment, GroundTruthField, add_blockage, noisy_ground_truth, power_table, sweep_ground_truth
from .crf import CrfParams
from .grid import Grid3D, PHopTable, build_grid, build_phop_table
from .labels import LabelSpace
from .protocol import Clock, InferBeamState, InferenceOptions, ProtocolConstants, trial_success
from .training import TrainConfig, TrainingSet, default_prior, offline_train

log = logging.getLogger(__name__)

HUMAN_DIMS = (0.11, 0.5, 1.7)
HUMAN_LOSS_DB = 30.0


@dataclass(frozen=True)
class Family:
    dims: tuple[int, int, int]
    spacing: float
    n_bs: int
    n_sec: int
    n_walls: tuple[int, int]
    n_furniture: tuple[int, int]
    wall_loss_db: float = 8.0
    furniture_loss_db: float = 4.0
    beta_cells: float = 5.0


FAMILIES = {
    "toy": Family((8, 8, 2), 0.5, 2, 6, (0, 0), (1, 2), beta_cells=2.0),
    "condo": Family((20, 18, 8), 0.425, 3, 12, (1, 2), (3, 6)),
    "office": Family((35, 20, 5), 0.6, 6, 12, (2, 4), (6, 12), beta_cells=20.0),
}


@dataclass
class ScenarioConfig:
    family: str = "condo"
    dims: tuple[int, int, int] | None = None
    n_bs: int | None = None
    n_sec: int | None = None
    sample_fraction: float = 0.01
    delta_m: float = 1.0
    n_ues: int = 1000
    n_blockages: int = 20
    sessions_per_blockage: int = 50
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train_seed: int = 0
    n_train: int = 50
    n_test: int = 5
    train_subset: int = 3  # training environments actually fitted
    max_rank: int = 8
    tied: bool = True
    eta: float = 1.0
    max_iters: int = 100
    train_evidence: str = "sampled"  # full | sampled
    train_draws: int = 2
    train_damping: float = 0.3
    engine: str = "lbp"
    p_th: float = 1e-6
    xi: int = 1
    beta: float | None = None  # cells; family default when None
    update_samples: bool = True
    output_dir: str = "out"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample fraction must lie in (0, 1]")
        if self.delta_m < 0:
            raise ValueError("localization error must be >= 0")
        if self.n_test < 1 or self.n_train < 1:
            raise ValueError("need at least one training and one test environment")
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.dims is not None:
            self.dims = tuple(int(d) for d in self.dims)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        if self.dims is not None:
            d["dims"] = list(self.dims)
        return d

    @property
    def template(self) -> Family:
        f = FAMILIES[self.family]
        return dataclasses.replace(
            f,
            dims=self.dims or f.dims,
            n_bs=self.n_bs or f.n_bs,
            n_sec=self.n_sec or f.n_sec,
        )

    def constants(self) -> ProtocolConstants:
        beta = self.template.beta_cells if self.beta is None else self.beta
        return ProtocolConstants(xi_bs=self.xi, xi_ue=self.xi, p_th=self.p_th, beta=beta)


@dataclass
class ResultBundle:
    sessions: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# environments


def _perimeter_bs(rng, extent, n_bs):
    """BSs on distinct perimeter walls (cycling when n_bs > 4), just below the ceiling."""
    X, Y, Z = extent
    walls = rng.permutation(4)
    out = []
    for i in range(n_bs):
        side = int(walls[i % 4])
        t = rng.uniform(0.15, 0.85)
        inset = 0.05
        if side == 0:
            pos = (t * X, inset, Z)
        elif side == 1:
            pos = (X - inset, t * Y, Z)
        elif side == 2:
            pos = (t * X, Y - inset, Z)
        else:
            pos = (inset, t * Y, Z)
        out.append(BaseStation(pos, float(rng.uniform(0, 2 * np.pi))))
    return tuple(out)


def _walls(rng, extent, n, loss_db):
    """Full-height partitions with a door gap, thickness 0.1 m."""
    X, Y, Z = extent
    out = []
    for _ in range(n):
        if rng.random() < 0.5:
            x = rng.uniform(0.3, 0.7) * X
            gap = rng.uniform(0.2, 0.8) * Y
            for lo, hi in ((0.0, gap - 0.45), (gap + 0.45, Y)):
                if hi - lo > 0.05:
                    out.append(Box((x - 0.05, lo, 0.0), (x + 0.05, hi, Z + 0.1), loss_db))
        else:
            y = rng.uniform(0.3, 0.7) * Y
            gap = rng.uniform(0.2, 0.8) * X
            for lo, hi in ((0.0, gap - 0.45), (gap + 0.45, X)):
                if hi - lo > 0.05:
                    out.append(Box((lo, y - 0.05, 0.0), (hi, y + 0.05, Z + 0.1), loss_db))
    return out


def _furniture(rng, extent, n, loss_db):
    X, Y, _ = extent
    out = []
    for _ in range(n):
        dx, dy = rng.uniform(0.4, 1.5, size=2)
        dz = rng.uniform(0.5, 1.2)
        x = rng.uniform(dx / 2, X - dx / 2)
        y = rng.uniform(dy / 2, Y - dy / 2)
        out.append(Box.from_floor(x, y, (dx, dy, dz), loss_db))
    return out


def make_environment(template: Family, seed: int, params: ChannelParams | None = None) -> Environment:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE4F]))
    grid = build_grid(template.dims, template.spacing)
    extent = tuple(float(e) for e in grid.extent)
    bss = _perimeter_bs(rng, extent, template.n_bs)
    obs = _walls(rng, extent, int(rng.integers(template.n_walls[0], template.n_walls[1] + 1)), template.wall_loss_db)
    obs += _furniture(rng, extent, int(rng.integers(template.n_furniture[0], template.n_furniture[1] + 1)), template.furniture_loss_db)
    return Environment(grid, bss, template.n_sec, template.n_sec, tuple(obs), params or ChannelParams(), seed)


def gen_environments(family, count: int, seed: int) -> list[Environment]:
    """``count`` floor plans of one family; environment i is seeded by (seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    template = FAMILIES[family] if isinstance(family, str) else family
    return [make_environment(template, int(np.random.SeedSequence([seed, i]).generate_state(1)[0])) for i in range(count)]


def split_train_test(envs, n_train: int):
    return envs[:n_train], envs[n_train:]


def training_sets(gts: list[GroundTruthField]) -> tuple[TrainingSet, TrainingSet]:
    space = gts[0].space
    D_bs = TrainingSet(np.stack([g.bs for g in gts]), space.n_bs)
    D_sec = TrainingSet(np.stack([g.sec for g in gts]), space.n_sec)
    return D_bs, D_sec


def train_family(cfg: ScenarioConfig, seed: int, gts: list[GroundTruthField] | None = None):
    """Fit both CRFs on the first ``train_subset`` training environments of a seed."""
    if gts is None:
        envs = gen_environments(cfg.template, cfg.n_train + cfg.n_test, seed)[: cfg.n_train]
        gts = [sweep_ground_truth(e) for e in envs[: cfg.train_subset]]
    grid = build_grid(cfg.template.dims, cfg.template.spacing)
    table = build_phop_table(grid.dims, cfg.max_rank)
    D_bs, D_sec = training_sets(gts)
    tcfg = TrainConfig(
        eta=cfg.eta, max_iters=cfg.max_iters, engine=cfg.engine, seed=seed, evidence=cfg.train_evidence,
        sample_fraction=cfg.sample_fraction, sample_draws=cfg.train_draws, lbp_damping=cfg.train_damping, lbp_tol=1e-5,
        halve_on_rise=True,
    )
    # sampled evidence starts from zero: the prior means sit in the strongly coupled regime where LBP wanders
    at_prior = cfg.train_evidence == "full"
    r1, r2 = offline_train(D_bs, D_sec, grid, table, tcfg, default_prior(cfg.max_rank), tied=cfg.tied, at_prior=at_prior)
    return r1, r2


# ---------------------------------------------------------------------------
# alignment


def test_area_layers(grid: Grid3D, z_lo: float = 0.5, z_hi: float = 2.0) -> tuple[int, int]:
    lo = int(np.clip(round(z_lo / grid.spacing), 0, grid.dims[2] - 1))
    hi = int(np.clip(round(z_hi / grid.spacing), 0, grid.dims[2] - 1))
    return lo, hi


def draw_ue_locations(grid: Grid3D, n: int, rng):
    """True positions uniform over the test area, plus unit-ball offsets for localization error."""
    lo, hi = test_area_layers(grid)
    ext = grid.extent
    xy = rng.uniform(0, 1, size=(n, 2)) * ext[:2]
    z = rng.uniform(lo - 0.5, hi + 0.5, size=n) * grid.spacing
    z = np.clip(z, lo * grid.spacing, hi * grid.spacing)
    true = np.column_stack([xy, z]) + np.asarray(grid.origin)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(0, 1, size=n) ** (1 / 3)
    return true, d * r[:, None]


def initial_samples(grid: Grid3D, gt: GroundTruthField, fraction: float, rng):
    n = max(1, int(round(fraction * grid.n_nodes)))
    nodes = np.sort(rng.choice(grid.n_nodes, size=n, replace=False))
    return nodes, gt.beam_id[nodes]


def _task_rng(seed: int, env_idx: int, tag: int):
    return np.random.default_rng(np.random.SeedSequence([seed, env_idx, tag]))


def _make_state(cfg, env, gt, theta_bs, theta_sec, seed, env_idx):
    grid = env.grid
    table = build_phop_table(grid.dims, cfg.max_rank)
    state = InferBeamState(grid, table, env.space, theta_bs, theta_sec, cfg.constants(), InferenceOptions())
    nodes, beams = initial_samples(grid, gt, cfg.sample_fraction, _task_rng(seed, env_idx, 1))
    state.set_samples(nodes, beams)
    return state


def _alignment_task(args):
    cfg, seed, env_idx, env, theta_bs, theta_sec, n_ues, deltas = args
    gt = sweep_ground_truth(env)
    true, unit = draw_ue_locations(env.grid, n_ues, _task_rng(seed, env_idx, 2))
    rows = []
    for delta in deltas:
        state = _make_state(cfg, env, gt, theta_bs, theta_sec, seed, env_idx)
        c = state.constants
        clock = Clock()
        for i in range(n_ues):
            sess = state.new_session(i, true[i], true[i] + delta * unit[i])
            res = state.obp(sess, gt, clock, update_samples=cfg.update_samples)
            rows.append({
                "seed": seed, "env": env_idx, "delta_m": float(delta), "session": i,
                "true_node": sess.true_node, "node": sess.node, "beam_id": res.beam_id,
                "n_trials": res.n_trials, "sls": int(res.used_sls),
                "elapsed_ms": res.elapsed_ms, "traditional_ms": c.traditional_ms(env.space),
            })
    return rows


def _pmap(fn, tasks, workers: int):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))


def _trained(cfg, seeds, theta=None):
    """One parameter pair shared by every seed: trained once on the ``train_seed`` plans."""
    if theta is None:
        r1, r2 = train_family(cfg, cfg.train_seed)
        theta = (r1.params, r2.params)
    return {s: theta for s in seeds}


def _test_envs(cfg, seed):
    envs = gen_environments(cfg.template, cfg.n_train + cfg.n_test, seed)
    return envs[cfg.n_train:]


def _ues_per_env(total: int, n_env: int) -> list[int]:
    base, extra = divmod(total, n_env)
    return [base + (i < extra) for i in range(n_env)]


def run_alignment_study(cfg: ScenarioConfig, theta=None, deltas=None, workers: int = 1) -> ResultBundle:
    """OBP for ``n_ues`` UEs per seed spread over the test environments.

    ``deltas`` lists localization-error radii to replay on identical UE
    draws; defaults to ``cfg.delta_m``.
    """
    deltas = [cfg.delta_m] if deltas is None else list(deltas)
    thetas = _trained(cfg, cfg.seeds, theta)
    tasks = []
    for s in cfg.seeds:
        for j, (env, n) in enumerate(zip(_test_envs(cfg, s), _ues_per_env(cfg.n_ues, cfg.n_test))):
            tasks.append((cfg, s, j, env, thetas[s][0], thetas[s][1], n, deltas))
    rows = [r for chunk in _pmap(_alignment_task, tasks, workers) for r in chunk]
    rows.sort(key=lambda r: (r["delta_m"], r["seed"], r["env"], r["session"]))
    return ResultBundle(rows, summarize_alignment(rows))


def trials_cdf(n_trials, max_n: int = 20) -> np.ndarray:
    """Fraction of sessions resolved by inference within n trials, n = 1..max_n."""
    t = np.asarray(n_trials)
    return np.array([np.mean(t <= n) for n in range(1, max_n + 1)]) if len(t) else np.zeros(max_n)


def summarize_alignment(rows) -> dict:
    out = {}
    for delta in sorted({r["delta_m"] for r in rows}):
        sel = [r for r in rows if r["delta_m"] == delta]
        trials = np.array([r["n_trials"] for r in sel])
        sls = np.array([r["sls"] for r in sel], bool)
        inferred = np.where(sls, np.iinfo(np.int64).max, trials)
        cdf = trials_cdf(inferred)
        out[f"{delta:g}"] = {
            "sessions": len(sel),
            "mean_trials": float(trials.mean()),
            "within_1": float(cdf[0]),
            "within_6": float(cdf[5]),
            "sls_rate": float(sls.mean()),
            "cdf": [float(x) for x in cdf],
        }
    return out


# ---------------------------------------------------------------------------
# blockage


def _blockage_task(args):
    cfg, seed, env_idx, env, theta_bs, theta_sec = args
    gt = sweep_ground_truth(env)
    state = _make_state(cfg, env, gt, theta_bs, theta_sec, seed, env_idx)
    rng = _task_rng(seed, env_idx, 3)
    true, _ = draw_ue_locations(env.grid, cfg.sessions_per_blockage, rng)
    clock = Clock()
    sessions = []
    for i in range(len(true)):
        sess = state.new_session(i, true[i], true[i])
        state.obp(sess, gt, clock, update_samples=False)
        sessions.append(sess)
    ext = env.grid.extent
    rows = []
    for b in range(cfg.n_blockages):
        x, y = rng.uniform(0, 1, size=2) * ext[:2]
        box = Box.from_floor(x, y, HUMAN_DIMS, HUMAN_LOSS_DB)
        env2, after, changed = add_blockage(env, box, gt)
        hit = [s for s in sessions if s.true_node in set(changed.tolist())]
        if not hit:
            continue
        # throughput trigger: received power of the refined in-use beam under the blocker
        rx = power_table(env2, [s.true_node for s in hit])
        for sess, row in zip(hit, rx):
            if not state.obap_needed(float(row[sess.beam_id])):
                continue
            new_beam = int(after.beam_id[sess.true_node])
            trial = dataclasses.replace(sess, removed=set(sess.removed))
            res = state.obap(trial, new_beam, Clock(clock.now))
            rows.append({
                "seed": seed, "env": env_idx, "blockage": b, "session": sess.session_id,
                "node": sess.node, "old_beam": sess.in_use_entry, "new_beam": new_beam,
                "extra_trials": res.n_trials, "sls": int(res.used_sls),
            })
    return rows


def run_blockage_study(cfg: ScenarioConfig, theta=None, workers: int = 1) -> ResultBundle:
    """Human-proxy blockers at random floor positions.

    A session is affected when its node's best beam changed and the in-use
    beam's throughput fell below the OBAP threshold.
    """
    thetas = _trained(cfg, cfg.seeds, theta)
    tasks = [
        (cfg, s, j, env, thetas[s][0], thetas[s][1])
        for s in cfg.seeds for j, env in enumerate(_test_envs(cfg, s))
    ]
    rows = [r for chunk in _pmap(_blockage_task, tasks, workers) for r in chunk]
    rows.sort(key=lambda r: (r["seed"], r["env"], r["blockage"], r["session"]))
    extra = np.array([r["extra_trials"] for r in rows])
    sls = np.array([r["sls"] for r in rows], bool)
    ok = np.where(sls, np.iinfo(np.int64).max, extra)
    summary = {
        "affected": len(rows),
        "within_1": float(np.mean(ok <= 1)) if len(rows) else float("nan"),
        "within_4": float(np.mean(ok <= 4)) if len(rows) else float("nan"),
        "sls_rate": float(sls.mean()) if len(rows) else float("nan"),
    }
    return ResultBundle(rows, summary)


# ---------------------------------------------------------------------------
# noise robustness


def flip_rates(clean: GroundTruthField, noisy: GroundTruthField) -> tuple[float, float]:
    """(fraction of nodes whose BS changed, fraction whose sector tuple changed)."""
    return float(np.mean(clean.bs != noisy.bs)), float(np.mean(clean.sec != noisy.sec))


def calibrate_noise(envs, gts, target_bs: float = 0.17, target_sec: float = 0.20, seed: int = 0, rounds: int = 4, steps: int = 20):
    """Alternating bisection on (sigma_bs, sigma_sec) for the target flip rates.

    Noise draws are fixed per environment, so the rates move monotonically
    with each sigma and the search is reproducible.
    """
    def rates(sb, ss):
        fb, fs = [], []
        for i, (env, gt) in enumerate(zip(envs, gts)):
            noisy = noisy_ground_truth(env, sb, ss, np.random.default_rng([seed, i, 0xF11]))
            a, b = flip_rates(gt, noisy)
            fb.append(a)
            fs.append(b)
        return float(np.mean(fb)), float(np.mean(fs))

    def bisect(f, target, hi=40.0):
        lo = 0.0
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            if f(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    sb, ss = 0.0, 0.0
    for _ in range(rounds):
        sb = bisect(lambda x: rates(x, ss)[0], target_bs)
        ss = bisect(lambda x: rates(sb, x)[1], target_sec)
    fb, fs = rates(sb, ss)
    return sb, ss, fb, fs


def _noise_task(args):
    cfg, seed = args
    envs = gen_environments(cfg.template, cfg.n_train, seed)[: cfg.train_subset]
    gts = [sweep_ground_truth(e) for e in envs]
    sb, ss, fb, fs = calibrate_noise(envs, gts, seed=seed)
    noisy = [noisy_ground_truth(e, sb, ss, np.random.default_rng([seed, i, 0xF11])) for i, e in enumerate(envs)]
    c1, c2 = train_family(cfg, seed, gts)
    n1, n2 = train_family(cfg, seed, noisy)
    return seed, sb, ss, fb, fs, (c1.params, c2.params), (n1.params, n2.params)


def noise_robustness_study(cfg: ScenarioConfig, workers: int = 1) -> ResultBundle:
    """Clean vs noisy training per seed; relative change of exp(w_k) for both CRFs."""
    rows = []
    for seed, sb, ss, fb, fs, clean, noisy in _pmap(_noise_task, [(cfg, s) for s in cfg.seeds], workers):
        for name, pc, pn in (("bs", clean[0], noisy[0]), ("sec", clean[1], noisy[1])):
            ec, en = np.exp(np.asarray(pc.w)), np.exp(np.asarray(pn.w))
            for k in range(len(ec)):
                rows.append({
                    "seed": seed, "crf": name, "k": k + 1, "exp_w_clean": float(ec[k]), "exp_w_noisy": float(en[k]),
                    "rel_change": float(abs(en[k] - ec[k]) / ec[k]),
                    "m_clean": float(np.mean(pc.m)), "m_noisy": float(np.mean(pn.m)),
                    "sigma_bs": sb, "sigma_sec": ss, "flip_bs": fb, "flip_sec": fs,
                })
    big = [r["rel_change"] for r in rows if r["exp_w_clean"] > 0.1]
    summary = {"max_rel_change": float(max(big)) if big else 0.0, "n_compared": len(big)}
    return ResultBundle(rows, summary)


# ---------------------------------------------------------------------------
# latency


def latency_report(bundle: ResultBundle, constants: ProtocolConstants | None = None, space: LabelSpace | None = None) -> list[dict]:
    """Mean and percentile latencies, InferBeam vs the traditional sweep, per delta."""
    out = []
    for delta in sorted({r["delta_m"] for r in bundle.sessions}):
        sel = [r for r in bundle.sessions if r["delta_m"] == delta]
        ib = np.array([r["elapsed_ms"] for r in sel])
        tr = np.array([r["traditional_ms"] for r in sel])
        out.append({
            "delta_m": delta,
            "sessions": len(sel),
            "inferbeam_mean_ms": float(ib.mean()),
            "inferbeam_p50_ms": float(np.percentile(ib, 50)),
            "inferbeam_p90_ms": float(np.percentile(ib, 90)),
            "traditional_mean_ms": float(tr.mean()),
            "reduction_pct": float(100.0 * (1 - ib.mean() / tr.mean())),
        })
    return out


def reduction_term_ms(n_trials: int, n_sec: int, t_frame_ms: float = 1.0) -> float:
    """Air-time saved versus a two-sided sweep: (2 n_sec - 2 N_trials) T_frame."""
    return (2 * n_sec - 2 * n_trials) * t_frame_ms
