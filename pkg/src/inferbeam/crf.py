"""Grid CRF with p-hop evidence potentials and Potts edge penalties.

Node potential (log domain) of label x at node v is the w-weighted count of
evidence nodes at each p-hop rank carrying label x; an edge adds m_e when its
endpoints disagree. Two evidence modes share one model type:

* clamped: a sparse sample set, sample nodes pinned to their labels
  (test-time inference);
* training: a full labeling acts as evidence for every other node, and all
  nodes are free (the model whose likelihood is maximised in training).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from .grid import Grid3D, PHopTable

DEFAULT_ENUM_BUDGET = 2_000_000


class EnumerationBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorConfig:
    mu_w: np.ndarray
    sigma_w: np.ndarray
    mu_m: float
    sigma_m: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_w) <= 0) or self.sigma_m <= 0:
            raise ValueError("prior standard deviations must be positive")

    @classmethod
    def flat(cls, K: int, sigma: float = 1.0, mu_w=0.0, mu_m=0.0) -> "PriorConfig":
        return cls(np.full(K, float(mu_w)), np.full(K, float(sigma)), float(mu_m), float(sigma))


@dataclass(frozen=True)
class CrfParams:
    """CRF weights: ``w`` per p-hop rank and ``m`` per edge (length 1 when tied)."""

    w: np.ndarray
    m: np.ndarray
    prior: PriorConfig
    tied: bool = False

    def __post_init__(self):
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.m))):
            raise ValueError("CRF parameters must be finite")

    @property
    def K(self) -> int:
        return len(self.w)

    def edge_m(self, n_edges: int) -> np.ndarray:
        m = np.asarray(self.m, dtype=float)
        if self.tied:
            return np.full(n_edges, float(m[0]))
        if len(m) != n_edges:
            raise ValueError(f"expected {n_edges} edge penalties, got {len(m)}")
        return m

    @classmethod
    def init(cls, K: int, n_edges: int, prior: PriorConfig, tied=False, at_prior=True) -> "CrfParams":
        w = np.array(prior.mu_w, dtype=float) if at_prior else np.zeros(K)
        m0 = prior.mu_m if at_prior else 0.0
        m = np.full(1 if tied else n_edges, float(m0))
        return cls(w, m, prior, tied)

    def with_values(self, w, m) -> "CrfParams":
        return replace(self, w=np.asarray(w, float), m=np.asarray(m, float))


@dataclass(frozen=True)
class Evidence:
    nodes: np.ndarray
    labels: np.ndarray
    n_labels: int

    def __post_init__(self):
        if len(np.unique(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate evidence nodes")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_labels):
            raise ValueError("evidence label outside the label space")

    @classmethod
    def of(cls, nodes, labels, n_labels) -> "Evidence":
        return cls(np.asarray(nodes, dtype=np.int64), np.asarray(labels, dtype=np.int64), int(n_labels))

    @classmethod
    def full(cls, labeling, n_labels) -> "Evidence":
        lab = np.asarray(labeling, dtype=np.int64)
        return cls(np.arange(len(lab)), lab, int(n_labels))


@dataclass
class MarginalField:
    probs: np.ndarray  # (n_nodes, n_labels)
    converged: bool = True
    iterations: int = 0


# ---------------------------------------------------------------------------
# potentials


def shell_counts(grid: Grid3D, table: PHopTable, evidence: Evidence, col_of=None, n_cols=None) -> np.ndarray:
    """counts[k-1, v, c]: evidence nodes at rank k from v whose label maps to column c."""
    K = table.max_rank
    col_of = np.arange(evidence.n_labels) if col_of is None else col_of
    n_cols = evidence.n_labels if n_cols is None else n_cols
    V = grid.n_nodes
    out = np.zeros((K, V, n_cols))
    if len(evidence.nodes) == 0:
        return out
    src = grid.coords(evidence.nodes)
    cols = col_of[evidence.labels]
    for k in range(table.n_ranks):
        acc = np.zeros(V * n_cols)
        for off in table.shells[k]:
            tgt = src + off
            ok = grid.in_bounds(tgt)
            t = grid.index(tgt[ok, 0], tgt[ok, 1], tgt[ok, 2])
            acc += np.bincount(t * n_cols + cols[ok], minlength=V * n_cols)
        out[k] = acc.reshape(V, n_cols)
    return out


def node_potential_log(v: int, x: int, evidence: Evidence, w, grid: Grid3D, table: PHopTable) -> float:
    """sum_k w_k * #{evidence s != v at rank k with label x}; direct loop."""
    cv = grid.coords(v)
    total = 0.0
    for s, lab in zip(evidence.nodes, evidence.labels):
        if lab != x or s == v:
            continue
        r = table.rank_of_sqdist(int(((grid.coords(s) - cv) ** 2).sum()))
        if r is not None and 1 <= r <= len(w):
            total += w[r - 1]
    return float(total)


def edge_potential_log(x_v, x_u, m) -> float:
    return float(m) if x_v != x_u else 0.0


@dataclass
class PottsModel:
    """A CRF instance ready for inference, possibly over pooled labels.

    Column ``c`` stands for ``mult[c]`` interchangeable original labels; only
    the last column may be pooled (labels absent from all evidence).
    """

    field: np.ndarray  # (V, L) log node potentials, clamped rows already applied
    mult: np.ndarray  # (L,)
    col_labels: np.ndarray  # original label id per column, -1 for the pooled column
    n_labels: int
    clamp: np.ndarray  # (V,) column index or -1
    edges: np.ndarray
    m_e: np.ndarray
    counts: np.ndarray | None = None  # (K, V, L) evidence counts, for u_k statistics
    grid: Grid3D | None = field(default=None, repr=False)

    @property
    def n_cols(self) -> int:
        return len(self.mult)

    def expand(self, beliefs: np.ndarray) -> np.ndarray:
        """Per-member column beliefs -> (V, n_labels) probabilities."""
        if self.n_cols == self.n_labels and np.array_equal(self.col_labels, np.arange(self.n_labels)):
            return beliefs
        out = np.empty((beliefs.shape[0], self.n_labels))
        pooled = self.col_labels < 0
        if pooled.any():
            out[:] = beliefs[:, np.nonzero(pooled)[0][0]][:, None]
        present = ~pooled
        out[:, self.col_labels[present]] = beliefs[:, present]
        return out


def _columns(evidence: Evidence, compress: bool):
    n = evidence.n_labels
    present = np.unique(evidence.labels)
    if not compress or len(present) >= n - 1:
        return np.arange(n), np.ones(n, dtype=np.int64), np.arange(n)
    col_of = np.full(n, len(present), dtype=np.int64)
    col_of[present] = np.arange(len(present))
    mult = np.ones(len(present) + 1, dtype=np.int64)
    mult[-1] = n - len(present)
    col_labels = np.concatenate([present, [-1]])
    return col_of, mult, col_labels


def build_model(
    grid: Grid3D,
    table: PHopTable,
    params: CrfParams,
    evidence: Evidence,
    mode: str = "clamped",
    compress: bool = False,
    with_counts: bool = False,
) -> PottsModel:
    """Assemble node fields and edge penalties for ``mode`` in {clamped, training}."""
    if mode not in ("clamped", "training"):
        raise ValueError(f"unknown evidence mode {mode!r}")
    if params.K != table.max_rank:
        raise ValueError("parameter K does not match the p-hop table")
    col_of, mult, col_labels = _columns(evidence, compress)
    L = len(mult)
    counts = shell_counts(grid, table, evidence, col_of, L)
    fld = np.tensordot(np.asarray(params.w, float), counts, axes=1)
    clamp = np.full(grid.n_nodes, -1, dtype=np.int64)
    if mode == "clamped":
        clamp[evidence.nodes] = col_of[evidence.labels]
        rows = evidence.nodes
        fld[rows] = -np.inf
        fld[rows, clamp[rows]] = 0.0
    return PottsModel(
        fld, mult, col_labels, evidence.n_labels, clamp, grid.edges,
        params.edge_m(grid.n_edges), counts if with_counts else None, grid,
    )


def joint_log_unnorm(x, evidence: Evidence, params: CrfParams, grid: Grid3D, table: PHopTable) -> float:
    """Unnormalised log-probability of a complete labeling ``x``."""
    x = np.asarray(x)
    counts = shell_counts(grid, table, evidence)
    fld = np.tensordot(np.asarray(params.w, float), counts, axes=1)
    e = grid.edges
    m = params.edge_m(grid.n_edges)
    return float(fld[np.arange(len(x)), x].sum() + m[x[e[:, 0]] != x[e[:, 1]]].sum())


# ---------------------------------------------------------------------------
# exact enumeration


def _free_nodes(model: PottsModel) -> np.ndarray:
    return np.nonzero(model.clamp < 0)[0]


def _iter_states(model: PottsModel, budget: int, chunk: int = 65536):
    """Yield full labelings (chunk, V) over all free-node assignments."""
    free = _free_nodes(model)
    L = model.n_cols
    n_states = L ** len(free)
    if n_states > budget:
        raise EnumerationBudgetExceeded(f"{n_states} states exceed the enumeration budget {budget}")
    base = np.where(model.clamp >= 0, model.clamp, 0)
    powers = L ** np.arange(len(free) - 1, -1, -1, dtype=np.int64)
    for start in range(0, n_states, chunk):
        idx = np.arange(start, min(n_states, start + chunk), dtype=np.int64)
        X = np.broadcast_to(base, (len(idx), len(base))).copy()
        if len(free):
            X[:, free] = (idx[:, None] // powers) % L
        yield X


def _state_scores(model: PottsModel, X: np.ndarray) -> np.ndarray:
    free = _free_nodes(model)
    e = model.edges
    s = model.field[free[None, :], X[:, free]].sum(axis=1) if len(free) else np.zeros(len(X))
    return s + (X[:, e[:, 0]] != X[:, e[:, 1]]) @ model.m_e


def exact_summary(model: PottsModel, budget: int = DEFAULT_ENUM_BUDGET):
    """log Z, node marginals, E[u_k] and E[disagreement per edge] by enumeration.

    Requires an uncompressed model (every column a single label).
    """
    if np.any(model.mult != 1):
        raise ValueError("exact enumeration needs an uncompressed label space")
    scores = np.concatenate([_state_scores(model, X) for X in _iter_states(model, budget)])
    log_z = float(logsumexp(scores))
    V, L = model.field.shape
    marg = np.zeros((V, L))
    K = 0 if model.counts is None else model.counts.shape[0]
    eu = np.zeros(K)
    dis = np.zeros(len(model.edges))
    e = model.edges
    pos = 0
    for X in _iter_states(model, budget):
        p = np.exp(scores[pos:pos + len(X)] - log_z)
        pos += len(X)
        for l in range(L):
            marg[:, l] += p @ (X == l)
        dis += p @ (X[:, e[:, 0]] != X[:, e[:, 1]])
        if K:
            u = model.counts[:, np.arange(V)[None, :], X].sum(axis=2)  # (K, chunk)
            eu += u @ p
    return log_z, marg, eu, dis


def exact_log_z(model: PottsModel, budget: int = DEFAULT_ENUM_BUDGET) -> float:
    """log Z alone: slice transfer when it fits the budget, enumeration otherwise."""
    try:
        return float(transfer_marginals(model, budget)[0])
    except EnumerationBudgetExceeded:
        return float(logsumexp(np.concatenate([_state_scores(model, X) for X in _iter_states(model, budget)])))


def transfer_marginals(model: PottsModel, budget: int = DEFAULT_ENUM_BUDGET):
    """Exact log Z and node marginals by forward-backward over lattice slices.

    The longest grid axis is the chain; each slice is one joint variable with
    L ** slice_size states, so the cost is n_slices * L ** (2 * slice_size).
    """
    if np.any(model.mult != 1):
        raise ValueError("exact inference needs an uncompressed label space")
    grid = model.grid
    L = model.n_cols
    axis = int(np.argmax(grid.dims))
    coords = grid.all_coords
    n_sl = grid.dims[axis]
    slices = [np.nonzero(coords[:, axis] == i)[0] for i in range(n_sl)]
    ns = len(slices[0])
    n_states = L**ns
    if n_states * n_states > budget * 8:
        raise EnumerationBudgetExceeded(f"slice transfer needs {n_states}^2 states; budget {budget}")
    powers = L ** np.arange(ns - 1, -1, -1)
    S = (np.arange(n_states)[:, None] // powers) % L  # (n_states, ns) labels per slice position
    pos = np.empty(grid.n_nodes, dtype=np.int64)
    for sl in slices:
        pos[sl] = np.arange(ns)
    e = model.edges
    same = coords[e[:, 0], axis] == coords[e[:, 1], axis]
    slice_of = coords[:, axis]

    local = []
    for i, sl in enumerate(slices):
        with np.errstate(invalid="ignore"):
            phi = model.field[sl[None, :], S].sum(axis=1)
        ee = e[same & (slice_of[e[:, 0]] == i)]
        mm = model.m_e[same & (slice_of[e[:, 0]] == i)]
        if len(ee):
            phi = phi + (S[:, pos[ee[:, 0]]] != S[:, pos[ee[:, 1]]]) @ mm
        local.append(phi)
    trans = []
    for i in range(n_sl - 1):
        sel = (~same) & (np.minimum(slice_of[e[:, 0]], slice_of[e[:, 1]]) == i)
        ee, mm = e[sel], model.m_e[sel]
        a = np.where(slice_of[ee[:, 0]] == i, ee[:, 0], ee[:, 1])
        b = np.where(slice_of[ee[:, 0]] == i, ee[:, 1], ee[:, 0])
        T = np.zeros((n_states, n_states))
        for aa, bb, m in zip(pos[a], pos[b], mm):
            T += m * (S[:, aa][:, None] != S[:, bb][None, :])
        trans.append(T)

    fwd = [local[0]]
    for i in range(1, n_sl):
        fwd.append(local[i] + logsumexp(fwd[-1][:, None] + trans[i - 1], axis=0))
    bwd = [np.zeros(n_states)] * n_sl
    for i in range(n_sl - 2, -1, -1):
        bwd[i] = logsumexp(trans[i] + (local[i + 1] + bwd[i + 1])[None, :], axis=1)
    log_z = float(logsumexp(fwd[-1]))
    marg = np.zeros((grid.n_nodes, L))
    for i, sl in enumerate(slices):
        p = np.exp(fwd[i] + bwd[i] - log_z)
        for l in range(L):
            marg[sl, l] = p @ (S == l)
    return log_z, marg


def exact_marginals(model: PottsModel, budget: int = DEFAULT_ENUM_BUDGET):
    """(log Z, marginals): plain enumeration when it fits, slice transfer otherwise."""
    free = int(np.count_nonzero(model.clamp < 0))
    if model.n_cols**free <= budget:
        log_z, marg, _, _ = exact_summary(model, budget)
        return log_z, marg
    return transfer_marginals(model, budget)


def infer_marginals_exact(
    evidence: Evidence, params: CrfParams, grid: Grid3D, table: PHopTable,
    budget: int = DEFAULT_ENUM_BUDGET, mode: str = "clamped",
) -> MarginalField:
    """Exact marginals; refuses when neither enumeration nor slice transfer fits ``budget``."""
    model = build_model(grid, table, params, evidence, mode)
    _, marg = exact_marginals(model, budget)
    return MarginalField(marg, True, 0)


# ---------------------------------------------------------------------------
# loopy belief propagation


@dataclass
class LbpResult:
    beliefs: np.ndarray  # (V, L) per-member probabilities
    log_messages: np.ndarray  # (2E, L)
    converged: bool
    iterations: int
    agree: np.ndarray  # (E,) P(x_u == x_v) under the edge beliefs


def run_lbp(
    model: PottsModel,
    damping: float = 0.5,
    max_iters: int = 200,
    tol: float = 1e-6,
    init_log_messages: np.ndarray | None = None,
    schedule: str = "parity",
) -> LbpResult:
    """Damped sum-product on the Potts model.

    Potts edges reduce each message update to O(L): the outgoing message is
    e^m * H + (1 - e^m) * h(x), where h is the cavity belief and H its total
    mass counted with label multiplicity.

    ``schedule="flooding"`` updates every message from the previous sweep;
    ``"parity"`` first updates messages leaving even-parity nodes, then those
    leaving odd ones (the lattice is bipartite), which removes the period-2
    oscillation of flooding under strong coupling.
    """
    if schedule not in ("flooding", "parity"):
        raise ValueError(f"unknown LBP schedule {schedule!r}")
    if model.grid is not None and model.edges is model.grid.edges:
        return _lbp_lattice(model, damping, max_iters, tol, init_log_messages, schedule)
    V, L = model.field.shape
    e = model.edges
    E = len(e)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    rev = np.concatenate([np.arange(E, 2 * E), np.arange(E)])
    em = np.exp(np.concatenate([model.m_e, model.m_e]))[:, None]
    mult = model.mult.astype(float)
    inc = sparse.csr_matrix((np.ones(2 * E), (dst, np.arange(2 * E))), shape=(V, 2 * E))

    if init_log_messages is None:
        msg = np.full((2 * E, L), 1.0 / mult.sum())
    else:
        msg = np.exp(init_log_messages)
    log_msg = np.log(msg)

    def cavity(log_msg, sel=slice(None)):
        log_b = model.field + inc @ log_msg
        cav = log_b[src[sel]] - log_msg[rev[sel]]
        cav -= cav.max(axis=1, keepdims=True)
        return np.exp(cav)

    if schedule == "flooding" or model.grid is None:
        groups = [np.arange(2 * E)]
    else:
        par = model.grid.parity[src]
        groups = [np.nonzero(par == 0)[0], np.nonzero(par == 1)[0]]

    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        delta = 0.0
        for sel in groups:
            h = cavity(log_msg, sel)
            H = (h @ mult)[:, None]
            new = em[sel] * H + (1.0 - em[sel]) * h
            new /= (new @ mult)[:, None]
            new = (1.0 - damping) * new + damping * msg[sel]
            if len(sel):
                delta = max(delta, np.abs(new - msg[sel]).max())
            msg[sel] = new
            log_msg[sel] = np.log(new)
        if delta < tol:
            converged = True
            break
    if E == 0:
        converged = True

    log_b = model.field + inc @ log_msg
    log_b -= log_b.max(axis=1, keepdims=True)
    b = np.exp(log_b)
    b /= (b @ mult)[:, None]

    h = cavity(log_msg)
    hu, hv = h[:E], h[E:]  # cavities of u (towards v) and of v (towards u)
    diag = (hu * hv) @ mult
    tot = (hu @ mult) * (hv @ mult)
    emE = em[:E, 0]
    agree = diag / (diag + emE * (tot - diag)) if E else np.zeros(0)
    return LbpResult(b, log_msg, converged, it, agree)


class _LatticeLayout:
    """Directed messages of a grid model stored per direction as (a, b, c, L) arrays.

    ``out[(ax, s)][i]`` is the message from node i to node i + s * e_ax.
    """

    def __init__(self, grid: Grid3D, edges: np.ndarray):
        self.dims = grid.dims
        u, v = edges[:, 0], edges[:, 1]
        # axis from the coordinate step; index strides collide when an axis has length 1
        step = grid.all_coords[v] - grid.all_coords[u]
        self.ax = np.argmax(np.abs(step), axis=1).astype(np.int64) if len(edges) else np.zeros(0, np.int64)
        self.u, self.v = u, v
        self.parity = grid.parity.reshape(grid.dims).astype(bool)

    def axis_edges(self, ax):
        sel = np.nonzero(self.ax == ax)[0]
        return sel, self.u[sel], self.v[sel]

    def edge_values(self, vals: np.ndarray, fill: float):
        """Per-(ax, s) node arrays of an edge quantity, aligned with the sending node."""
        out = {}
        V = int(np.prod(self.dims))
        for ax in range(3):
            sel, u, v = self.axis_edges(ax)
            plus = np.full(V, fill)
            minus = np.full(V, fill)
            plus[u] = vals[sel]
            minus[v] = vals[sel]
            out[(ax, 1)] = plus.reshape(self.dims)
            out[(ax, -1)] = minus.reshape(self.dims)
        return out

    def to_edge_list(self, out: dict, L: int) -> np.ndarray:
        E = len(self.u)
        msgs = np.empty((2 * E, L))
        for ax in range(3):
            sel, u, v = self.axis_edges(ax)
            msgs[sel] = out[(ax, 1)].reshape(-1, L)[u]
            msgs[sel + E] = out[(ax, -1)].reshape(-1, L)[v]
        return msgs

    def from_edge_list(self, msgs: np.ndarray, L: int) -> dict:
        E = len(self.u)
        V = int(np.prod(self.dims))
        out = {}
        for ax in range(3):
            sel, u, v = self.axis_edges(ax)
            plus = np.full((V, L), 1.0)
            minus = np.full((V, L), 1.0)
            plus[u] = msgs[sel]
            minus[v] = msgs[sel + E]
            out[(ax, 1)] = plus.reshape(self.dims + (L,))
            out[(ax, -1)] = minus.reshape(self.dims + (L,))
        return out


def _shifted_in(out: dict, dims, L):
    """Incoming messages per (ax, s): the message that travelled in direction s."""
    inc = {}
    for (ax, s), arr in out.items():
        buf = np.ones(dims + (L,))
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        if s == 1:
            src[ax], dst[ax] = slice(0, -1), slice(1, None)
        else:
            src[ax], dst[ax] = slice(1, None), slice(0, -1)
        buf[tuple(dst)] = arr[tuple(src)]
        inc[(ax, s)] = buf
    return inc


def _lbp_lattice(model: PottsModel, damping, max_iters, tol, init_log_messages, schedule):
    grid = model.grid
    lay = _LatticeLayout(grid, model.edges)
    dims = grid.dims
    V, L = model.field.shape
    mult = model.mult.astype(float)
    fld = model.field - model.field.max(axis=1, keepdims=True)
    phi = np.exp(fld).reshape(dims + (L,))
    em = {k: v[..., None] for k, v in lay.edge_values(np.exp(np.asarray(model.m_e, float)), 1.0).items()}
    if init_log_messages is None:
        out = {(ax, s): np.full(dims + (L,), 1.0 / mult.sum()) for ax in range(3) for s in (1, -1)}
    else:
        out = lay.from_edge_list(np.exp(init_log_messages), L)
    masks = [~lay.parity[..., None], lay.parity[..., None]] if schedule == "parity" else [None]

    def product(out):
        inc = _shifted_in(out, dims, L)
        P = phi.copy()
        for arr in inc.values():
            P *= arr
        return P, inc

    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        delta = 0.0
        for mask in masks:
            P, inc = product(out)
            for (ax, s), old in out.items():
                h = P / inc[(ax, -s)]
                H = h @ mult
                new = em[(ax, s)] * H[..., None] + (1.0 - em[(ax, s)]) * h
                new /= (new @ mult)[..., None]
                if damping:
                    new = (1.0 - damping) * new + damping * old
                if mask is not None:
                    new = np.where(mask, new, old)
                delta = max(delta, float(np.abs(new - old).max()))
                out[(ax, s)] = new
        if delta < tol:
            converged = True
            break
    if len(model.edges) == 0:
        converged = True

    P, inc = product(out)
    b = P.reshape(V, L)
    b = b / (b @ mult)[:, None]
    E = len(model.edges)
    agree = np.zeros(E)
    for ax in range(3):
        sel, u, v = lay.axis_edges(ax)
        hu = (P / inc[(ax, -1)]).reshape(V, L)[u]  # u without the message from v
        hv = (P / inc[(ax, 1)]).reshape(V, L)[v]
        diag = (hu * hv) @ mult
        tot = (hu @ mult) * (hv @ mult)
        emE = np.exp(np.asarray(model.m_e, float)[sel])
        agree[sel] = diag / (diag + emE * (tot - diag))
    log_msg = np.log(lay.to_edge_list(out, L))
    return LbpResult(b, log_msg, converged, it, agree)


def infer_marginals_lbp(
    evidence: Evidence, params: CrfParams, grid: Grid3D, table: PHopTable,
    damping: float = 0.5, max_iters: int = 200, tol: float = 1e-6,
    compress: bool = True, mode: str = "clamped",
) -> MarginalField:
    model = build_model(grid, table, params, evidence, mode, compress=compress)
    res = run_lbp(model, damping, max_iters, tol)
    return MarginalField(model.expand(res.beliefs), res.converged, res.iterations)


# ---------------------------------------------------------------------------
# Gibbs sampling


@dataclass
class GibbsResult:
    eu: np.ndarray  # (K,) E[u_k]
    eu_se: np.ndarray
    dis: np.ndarray  # (E,) E[1{x_u != x_v}]
    dis_se: np.ndarray


def _gibbs_chain(model: PottsModel, color_classes, n_sweeps, burn_in, rng):
    V, L = model.field.shape
    e = model.edges
    clamp = model.clamp
    x = np.where(clamp >= 0, clamp, rng.integers(0, L, size=V))
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    m_d = np.concatenate([model.m_e, model.m_e])
    K = 0 if model.counts is None else model.counts.shape[0]
    u_acc = np.zeros(K)
    d_acc = np.zeros(len(e))
    n_keep = 0
    plan = []
    for nodes in color_classes:
        pos = np.full(V, -1)
        pos[nodes] = np.arange(len(nodes))
        sel = pos[dst] >= 0
        plan.append((nodes, pos[dst[sel]], src[sel], m_d[sel]))
    for sweep in range(n_sweeps):
        for nodes, tpos, nsrc, nm in plan:
            if len(nodes) == 0:
                continue
            agg = np.bincount(tpos * L + x[nsrc], weights=nm, minlength=len(nodes) * L).reshape(len(nodes), L)
            logits = model.field[nodes] - agg
            g = rng.gumbel(size=logits.shape)
            x[nodes] = np.argmax(logits + g, axis=1)
        if sweep >= burn_in:
            n_keep += 1
            d_acc += x[e[:, 0]] != x[e[:, 1]]
            if K:
                u_acc += model.counts[:, np.arange(V), x].sum(axis=1)
    return u_acc / n_keep, d_acc / n_keep


def gibbs_expectations(
    model: PottsModel, n_chains: int = 8, n_sweeps: int = 500, burn_in: int = 100, seed: int = 0,
) -> GibbsResult:
    """Monte-Carlo E[u_k] and per-edge disagreement with chain-level standard errors.

    Checkerboard updates (the 6-connected lattice is bipartite); chain ``c``
    draws from its own spawned stream, so results do not depend on how the
    chains are scheduled.
    """
    if n_sweeps <= burn_in:
        raise ValueError("n_sweeps must exceed burn_in")
    if np.any(model.mult != 1):
        raise ValueError("Gibbs sampling needs an uncompressed label space")
    free = model.clamp < 0
    par = model.grid.parity
    classes = [np.nonzero(free & (par == c))[0] for c in (0, 1)]
    streams = np.random.SeedSequence(seed).spawn(n_chains)
    us, ds = [], []
    for ss in streams:
        u, d = _gibbs_chain(model, classes, n_sweeps, burn_in, np.random.default_rng(ss))
        us.append(u)
        ds.append(d)
    us, ds = np.array(us), np.array(ds)
    se = (lambda a: a.std(axis=0, ddof=1) / np.sqrt(len(a))) if n_chains > 1 else (lambda a: np.zeros(a.shape[1]))
    return GibbsResult(us.mean(axis=0), se(us), ds.mean(axis=0), se(ds))
