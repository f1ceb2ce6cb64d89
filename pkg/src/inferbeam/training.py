"""MAP learning of the CRF weights.

The training likelihood of a labeled grid D_r treats D_r itself as evidence
for every node (rank-0 self terms excluded) and scores D_r under the free
model, so

    (1/R) log P(theta | D) = mean_r [ score_r(D_r) - log Z_r(theta) ]
                             - sum_k (w_k - mu_w_k)^2 / (2 R sigma_w_k^2)
                             - sum_e (m_e - mu_m)^2 / (2 R sigma_m^2)

which is concave in theta; its gradient is empirical minus model
expectations of the sufficient statistics plus the prior pull.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from .crf import (
    CrfParams,
    Evidence,
    PriorConfig,
    build_model,
    exact_log_z,
    exact_summary,
    gibbs_expectations,
    run_lbp,
    DEFAULT_ENUM_BUDGET,
)
from .grid import Grid3D, PHopTable, shell_pairs

log = logging.getLogger(__name__)

LOS_SLOPE_DB = 12.0
LOS_SHADOW_DB = 1.8


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingSet:
    labelings: np.ndarray  # (R, V)
    n_labels: int

    def __post_init__(self):
        lab = np.asarray(self.labelings)
        if lab.ndim != 2:
            raise ValueError("labelings must be (R, n_nodes)")
        if lab.size and (lab.min() < 0 or lab.max() >= self.n_labels):
            raise ValueError("training label outside the label space")

    @property
    def R(self) -> int:
        return len(self.labelings)


@dataclass
class TrainConfig:
    eta: float = 0.05
    delta: float = 1e-4
    max_iters: int = 500
    engine: str = "auto"  # exact | gibbs | lbp | auto
    seed: int = 0
    enum_budget: int = DEFAULT_ENUM_BUDGET
    gibbs_chains: int = 8
    gibbs_sweeps: int = 500
    gibbs_burn_in: int = 100
    lbp_damping: float = 0.5
    lbp_iters: int = 200
    lbp_tol: float = 1e-6
    lbp_schedule: str = "flooding"
    precondition: bool = True
    divergence_window: int = 20
    divergence_factor: float = 10.0
    evidence: str = "full"  # full | sampled
    sample_fraction: float = 0.01
    sample_draws: int = 1
    halve_on_rise: bool = False  # halve eta and back off when the gradient norm doubles from its low since the last cut

    def __post_init__(self):
        if self.eta <= 0 or self.delta < 0 or self.max_iters < 1:
            raise ValueError("need eta > 0, delta >= 0, max_iters >= 1")
        if self.evidence not in ("full", "sampled"):
            raise ValueError(f"unknown training evidence {self.evidence!r}")
        if not 0 < self.sample_fraction <= 1 or self.sample_draws < 1:
            raise ValueError("need 0 < sample_fraction <= 1 and sample_draws >= 1")


# ---------------------------------------------------------------------------
# priors


def log_q(x):
    """log of the Gaussian tail probability Q(x)."""
    return log_ndtr(-np.asarray(x, dtype=float))


def prior_means(K: int, sigma_shadow: float = LOS_SHADOW_DB, slope: float = LOS_SLOPE_DB, mu_m_form: str = "difference"):
    """Analytic prior means (mu_w[1..K], mu_m).

    mu_w_k = sum_{k' != k} log Q(slope * log10(k / k') / (sigma * sqrt 2)).
    mu_m compares the k = 2 and k = 1 terms, either as a log ratio
    ("difference") or as the quotient of the two log sums ("quotient").
    """
    if K < 2:
        raise ValueError("prior means need K >= 2")
    ks = np.arange(1, K + 1, dtype=float)
    scale = sigma_shadow * math.sqrt(2.0)
    arg = slope * np.log10(ks[:, None] / ks[None, :]) / scale
    lq = log_q(arg)
    np.fill_diagonal(lq, 0.0)
    mu_w = lq.sum(axis=1)
    if mu_m_form == "difference":
        mu_m = mu_w[1] - mu_w[0]
    elif mu_m_form == "quotient":
        mu_m = mu_w[1] / mu_w[0]
    else:
        raise ValueError(f"unknown mu_m form {mu_m_form!r}")
    return mu_w, float(mu_m)


def default_prior(K: int, sigma: float = 1.0, mu_m_form: str = "difference") -> PriorConfig:
    mu_w, mu_m = prior_means(K, mu_m_form=mu_m_form)
    return PriorConfig(mu_w, np.full(K, float(sigma)), mu_m, float(sigma))


# ---------------------------------------------------------------------------
# statistics


def labeling_stats(labeling, grid: Grid3D, table: PHopTable) -> tuple[np.ndarray, np.ndarray]:
    """(u_k for k = 1..K, per-edge disagreement) of one full labeling."""
    x = np.asarray(labeling)
    u = np.zeros(table.max_rank)
    for k in range(1, table.n_ranks + 1):
        v, s = shell_pairs(grid, table, k)
        u[k - 1] = np.count_nonzero(x[v] == x[s])
    e = grid.edges
    return u, (x[e[:, 0]] != x[e[:, 1]]).astype(float)


def empirical_stats(D: TrainingSet, grid: Grid3D, table: PHopTable):
    """E_D[u_k] and E_D[disagreement] averaged over the R labeled grids."""
    if D.R == 0:
        return np.zeros(table.max_rank), np.zeros(grid.n_edges)
    us, ds = zip(*(labeling_stats(x, grid, table) for x in D.labelings))
    return np.mean(us, axis=0), np.mean(ds, axis=0)


def pair_counts(grid: Grid3D, table: PHopTable) -> np.ndarray:
    """Number of ordered node pairs at each rank (upper bound of u_k)."""
    return np.array(
        [len(shell_pairs(grid, table, k)[0]) if k <= table.n_ranks else 0 for k in range(1, table.max_rank + 1)],
        dtype=float,
    )


def training_samples(n_nodes: int, fraction: float, seed) -> np.ndarray:
    """Sorted sample nodes for one sparse-evidence training replicate."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = max(1, int(round(fraction * n_nodes)))
    return np.sort(rng.choice(n_nodes, size=min(n, n_nodes), replace=False))


class Objective:
    """Log-posterior and gradient of one CRF over a training set.

    Models for each D_r are built once; their evidence counts stay fixed
    and only the weights change between evaluations.

    With ``cfg.evidence == "full"`` each D_r is its own evidence and all
    nodes are free. With ``"sampled"`` each D_r is scored conditionally on
    ``sample_draws`` sparse sample sets drawn from it (sample nodes clamped),
    which matches how the model is queried at run time. Both are log-linear
    in theta, so concavity and the gradient form carry over.
    """

    def __init__(self, D: TrainingSet, grid: Grid3D, table: PHopTable, prior: PriorConfig, tied: bool, cfg: TrainConfig):
        self.D, self.grid, self.table, self.prior, self.tied, self.cfg = D, grid, table, prior, tied, cfg
        self.engine = self._pick_engine()
        compress = self.engine == "lbp"
        init = CrfParams.init(table.max_rank, grid.n_edges, prior, tied)
        self._base, us, ds = [], [], []
        for r, x in enumerate(D.labelings):
            if cfg.evidence == "full":
                model = build_model(grid, table, init, Evidence.full(x, D.n_labels), "training", compress, True)
                self._base.append(model)
                continue
            for d in range(cfg.sample_draws):
                nodes = training_samples(grid.n_nodes, cfg.sample_fraction, [cfg.seed, r, d, 0x5A])
                model = build_model(grid, table, init, Evidence.of(nodes, x[nodes], D.n_labels), "clamped", compress, True)
                model.counts[:, nodes, :] = 0.0  # clamped nodes are not scored
                col_of = np.full(D.n_labels, -1, dtype=np.int64)
                col_of[model.col_labels[model.col_labels >= 0]] = np.nonzero(model.col_labels >= 0)[0]
                pooled = np.nonzero(model.col_labels < 0)[0]
                if len(pooled):
                    col_of[col_of < 0] = pooled[0]
                cols = col_of[x]
                us.append(model.counts[:, np.arange(grid.n_nodes), cols].sum(axis=1))
                e = grid.edges
                ds.append((x[e[:, 0]] != x[e[:, 1]]).astype(float))
                self._base.append(model)
        if cfg.evidence == "full":
            self.emp_u, self.emp_d = empirical_stats(D, grid, table)
        elif us:
            self.emp_u, self.emp_d = np.mean(us, axis=0), np.mean(ds, axis=0)
        else:
            self.emp_u, self.emp_d = np.zeros(table.max_rank), np.zeros(grid.n_edges)
        self._msgs: list[np.ndarray | None] = [None] * len(self._base)
        self.calls = 0

    def pair_totals(self) -> np.ndarray:
        """Mean number of scored (node, evidence) pairs per rank; the w preconditioner."""
        if not self._base:
            return pair_counts(self.grid, self.table)
        return np.mean([m.counts.sum(axis=(1, 2)) for m in self._base], axis=0)

    @property
    def R_eff(self) -> int:
        return max(self.D.R, 1)

    def _pick_engine(self) -> str:
        eng = self.cfg.engine
        if eng != "auto":
            return eng
        return "exact" if self.D.n_labels ** self.grid.n_nodes <= self.cfg.enum_budget else "lbp"

    def _model(self, r: int, params: CrfParams):
        base = self._base[r]
        fld = np.tensordot(np.asarray(params.w, float), base.counts, axes=1)
        rows = np.nonzero(base.clamp >= 0)[0]
        if len(rows):
            fld[rows] = -np.inf
            fld[rows, base.clamp[rows]] = 0.0
        base.field = fld
        base.m_e = params.edge_m(self.grid.n_edges)
        return base

    def _prior_terms(self, params: CrfParams):
        p = self.prior
        w = np.asarray(params.w, float)
        m = np.asarray(params.m, float)
        R = self.R_eff
        lp = -np.sum((w - p.mu_w) ** 2 / (2 * R * np.asarray(p.sigma_w) ** 2))
        lp -= np.sum((m - p.mu_m) ** 2) / (2 * R * p.sigma_m**2)
        gw = (np.asarray(p.mu_w) - w) / (R * np.asarray(p.sigma_w) ** 2)
        gm = (p.mu_m - m) / (R * p.sigma_m**2)
        return lp, gw, gm

    def model_expectations(self, params: CrfParams, seed: int = 0):
        """Mean over r of model E[u_k], E[disagreement] and log Z (exact only)."""
        K, E = self.table.max_rank, self.grid.n_edges
        eu, ed, lz = np.zeros(K), np.zeros(E), 0.0
        cfg = self.cfg
        for r in range(len(self._base)):
            model = self._model(r, params)
            if self.engine == "exact":
                log_z, _, u, d = exact_summary(model, cfg.enum_budget)
                lz += log_z
            elif self.engine == "gibbs":
                res = gibbs_expectations(model, cfg.gibbs_chains, cfg.gibbs_sweeps, cfg.gibbs_burn_in, seed=[seed, r])
                u, d = res.eu, res.dis
                lz = np.nan
            elif self.engine == "lbp":
                res = run_lbp(model, cfg.lbp_damping, cfg.lbp_iters, cfg.lbp_tol, self._msgs[r], cfg.lbp_schedule)
                self._msgs[r] = res.log_messages
                b = res.beliefs
                u = np.einsum("kvl,vl->k", model.counts, b)
                d = 1.0 - res.agree
                lz = np.nan
            else:
                raise ValueError(f"unknown expectation engine {self.engine!r}")
            eu += u
            ed += d
        n = max(len(self._base), 1)
        return eu / n, ed / n, lz / n

    def log_posterior(self, params: CrfParams) -> float:
        """(1/R) log P(theta | D) up to a constant; needs the exact engine."""
        if self.engine != "exact" and self.D.R:
            raise ValueError("log_posterior needs exact partition functions")
        lp, _, _ = self._prior_terms(params)
        if self.D.R == 0:
            return float(lp)
        lz = np.mean([exact_log_z(self._model(r, params), self.cfg.enum_budget) for r in range(len(self._base))])
        w = np.asarray(params.w, float)
        m_e = params.edge_m(self.grid.n_edges)
        data = w @ self.emp_u + m_e @ self.emp_d
        return float(data - lz + lp)

    def gradient(self, params: CrfParams, seed: int = 0):
        """(d/dw_k, d/dm) of (1/R) log P(theta | D); d/dm has length 1 when tied."""
        self.calls += 1
        _, gw_p, gm_p = self._prior_terms(params)
        if self.D.R == 0:
            return gw_p, gm_p
        eu, ed, _ = self.model_expectations(params, seed)
        gw = self.emp_u - eu + gw_p
        gm_data = self.emp_d - ed
        gm = (np.array([gm_data.sum()]) if self.tied else gm_data) + gm_p
        return gw, gm


def log_posterior(params: CrfParams, D: TrainingSet, grid: Grid3D, table: PHopTable, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig(engine="exact")
    return Objective(D, grid, table, params.prior, params.tied, cfg).log_posterior(params)


def gradient(params: CrfParams, D: TrainingSet, grid: Grid3D, table: PHopTable, cfg: TrainConfig | None = None):
    cfg = cfg or TrainConfig(engine="exact")
    return Objective(D, grid, table, params.prior, params.tied, cfg).gradient(params, cfg.seed)


@dataclass
class TrainResult:
    params: CrfParams
    converged: bool
    iterations: int
    history: list = field(default_factory=list)


def gradient_ascent(theta0: CrfParams, D: TrainingSet, grid: Grid3D, table: PHopTable, cfg: TrainConfig) -> TrainResult:
    """Fixed-step gradient ascent on the log-posterior.

    With ``cfg.precondition`` the w-step is divided by the number of scored
    (node, evidence) pairs at each rank, so w and per-edge m move on comparable scales (u_k
    grows with the grid, a single edge indicator does not). The proposed
    step is checked against ``delta`` before it is applied.
    """
    obj = Objective(D, grid, table, theta0.prior, theta0.tied, cfg)
    scale_w = 1.0 / np.maximum(obj.pair_totals(), 1.0) if cfg.precondition else np.ones(theta0.K)
    w = np.array(theta0.w, float)
    m = np.array(theta0.m, float)
    if cfg.precondition and theta0.tied:
        scale_m = 1.0 / max(grid.n_edges, 1)
    else:
        scale_m = 1.0
    norms: list[float] = []
    history = []
    params = theta0
    eta = cfg.eta
    low, best = np.inf, None
    for it in range(1, cfg.max_iters + 1):
        gw, gm = obj.gradient(params, seed=cfg.seed * 100003 + it)
        norms.append(float(np.sqrt(np.sum(gw**2) + np.sum(gm**2))))
        history.append((it, norms[-1]))
        if cfg.halve_on_rise and norms[-1] > 2.0 * low:
            # back off to the point with the lowest norm since the last cut
            eta *= 0.5
            if eta < cfg.eta / 1024:
                raise TrainingDiverged(f"step cut ten times by iteration {it}; gradient norm {norms[-1]:.3g}")
            w, m, params = best
            low, best = np.inf, None
            continue
        if norms[-1] < low:
            low, best = norms[-1], (w, m, params)
        step_w = eta * scale_w * gw
        step_m = eta * scale_m * gm
        if max(np.abs(step_w).max(initial=0), np.abs(step_m).max(initial=0)) <= cfg.delta:
            return TrainResult(params, True, it, history)
        win = cfg.divergence_window
        # with backtracking the step cuts above are the divergence test
        if not cfg.halve_on_rise and len(norms) > win and norms[-1] > cfg.divergence_factor * norms[-1 - win] and norms[-1] > 1e-8:
            raise TrainingDiverged(
                f"gradient norm grew from {norms[-1 - win]:.3g} to {norms[-1]:.3g} over {win} iterations "
                f"(iteration {it}); lower eta"
            )
        w = w + step_w
        m = m + step_m
        params = params.with_values(w, m)
    log.info("gradient ascent stopped at max_iters=%d", cfg.max_iters)
    return TrainResult(params, False, cfg.max_iters, history)


def offline_train(D_bs: TrainingSet, D_sec: TrainingSet, grid: Grid3D, table: PHopTable, cfg: TrainConfig,
                  prior: PriorConfig | None = None, tied: bool = False, at_prior: bool = True):
    """Train the BS-label CRF on D_bs and the sector-tuple CRF on D_sec.

    ``at_prior=False`` starts from zero instead of the prior means.
    """
    if D_bs.labelings.shape[1:] != D_sec.labelings.shape[1:]:
        raise ValueError("training sets must share the grid")
    prior = prior or default_prior(table.max_rank)
    out = []
    for D in (D_bs, D_sec):
        theta0 = CrfParams.init(table.max_rank, grid.n_edges, prior, tied, at_prior=at_prior)
        out.append(gradient_ascent(theta0, D, grid, table, cfg))
    return out[0], out[1]
