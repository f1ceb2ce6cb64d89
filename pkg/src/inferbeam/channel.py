"""Synthetic indoor mm-wave channel and the exhaustive-sweep ground truth.

Stands in for a ray tracer: log-distance path loss with LOS/NLOS exponents,
a seeded per-(node, BS) shadow field, axis-aligned box obstacles with
penetration loss, and azimuth-sectored antennas at both ends of the link.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .grid import Grid3D
from .labels import LabelSpace


@dataclass(frozen=True)
class ChannelParams:
    n_los: float = 1.2
    n_nlos: float = 2.95
    sigma_los: float = 1.8
    sigma_nlos: float = 10.45
    pl_fs_d0: float = 68.0  # free-space loss at 1 m, 60 GHz
    tx_power_dbm: float = 10.0
    g_tx_dbi: float = 15.0
    g_rx_dbi: float = 15.0
    p_e: float = 0.0078
    sidelobe_floor_db: float = -20.0
    shadow_corr_m: float = 1.5  # 0 gives i.i.d. per-node draws

    def __post_init__(self):
        if self.n_los <= 0 or self.n_nlos <= 0:
            raise ValueError("path-loss exponents must be positive")
        if self.sigma_los < 0 or self.sigma_nlos < 0:
            raise ValueError("shadow std must be non-negative")
        if not 0 <= self.p_e < 1:
            raise ValueError("p_e must lie in [0, 1)")


@dataclass(frozen=True)
class BaseStation:
    position: tuple[float, float, float]
    orientation: float = 0.0  # azimuth of sector 0, radians


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    loss_db: float = 10.0

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"obstacle dims must be positive: {self.lo} -> {self.hi}")

    @classmethod
    def from_floor(cls, x, y, dims, loss_db, z0=0.0):
        """Box standing on the floor with its footprint centred at (x, y)."""
        dx, dy, dz = dims
        return cls((x - dx / 2, y - dy / 2, z0), (x + dx / 2, y + dy / 2, z0 + dz), loss_db)


@dataclass(frozen=True)
class Environment:
    grid: Grid3D
    base_stations: tuple[BaseStation, ...]
    n_sec_bs: int
    n_sec_ue: int
    obstacles: tuple[Box, ...] = ()
    params: ChannelParams = field(default_factory=ChannelParams)
    seed: int = 0

    def __post_init__(self):
        lo = np.asarray(self.grid.origin)
        hi = self.grid.extent
        for bs in self.base_stations:
            p = np.asarray(bs.position)
            if np.any(p < lo - 1e-9) or np.any(p > hi + 1e-9):
                raise ValueError(f"base station {bs.position} outside the grid bounds")

    @property
    def space(self) -> LabelSpace:
        return LabelSpace(len(self.base_stations), self.n_sec_bs, self.n_sec_ue)

    def with_obstacle(self, box: Box) -> "Environment":
        return replace(self, obstacles=self.obstacles + (box,))


@dataclass(frozen=True)
class GroundTruthField:
    beam_id: np.ndarray  # (n_nodes,)
    power_dbm: np.ndarray  # (n_nodes,)
    space: LabelSpace

    @property
    def bs(self) -> np.ndarray:
        return self.space.split_beam(self.beam_id)[0]

    @property
    def sec(self) -> np.ndarray:
        return self.beam_id % self.space.n_sec


def path_loss(d, los, params: ChannelParams, shadow=0.0):
    """Log-distance path loss in dB; distances below d0 = 1 m are clamped."""
    d = np.maximum(np.asarray(d, dtype=float), 1.0)
    n = np.where(los, params.n_los, params.n_nlos)
    return params.pl_fs_d0 + 10.0 * n * np.log10(d) + shadow


def segment_box_hits(p, q, boxes) -> np.ndarray:
    """(n_segments, n_boxes) flags: does segment p->q touch each closed box.

    Slab method; ``p`` is (n, 3), ``q`` is (3,) or (n, 3).
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.broadcast_to(np.asarray(q, dtype=float), p.shape)
    if not boxes:
        return np.zeros((len(p), 0), dtype=bool)
    lo = np.array([b.lo for b in boxes])[None, :, :]
    hi = np.array([b.hi for b in boxes])[None, :, :]
    d = (q - p)[:, None, :]
    p = p[:, None, :]
    flat = d == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - p) / d
        t2 = (hi - p) / d
    inside = (p >= lo) & (p <= hi)
    tmin_ax = np.where(flat, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax_ax = np.where(flat, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tmin = tmin_ax.max(axis=2)
    tmax = tmax_ax.min(axis=2)
    return (tmin <= tmax) & (tmax >= 0.0) & (tmin <= 1.0)


def is_los(p1, p2, obstacles) -> bool:
    """True iff the segment p1-p2 touches none of the obstacle boxes."""
    return not segment_box_hits(np.asarray(p1, float)[None], p2, list(obstacles)).any()


def expected_rx_power(k, d, params: ChannelParams, x_los=0.0, x_nlos=0.0):
    """Mean received power (dB) from a source k cells of size d away.

    Mixes the clear and blocked branches with blocking probability p_e*k*d;
    with the default exponents the log slope is 17.5*p_e*k*d + 12.
    """
    kd = np.asarray(k, dtype=float) * np.asarray(d, dtype=float)
    p_blk = params.p_e * kd
    slope = 10.0 * (params.n_nlos - params.n_los) * p_blk + 10.0 * params.n_los
    return (
        params.tx_power_dbm + params.g_tx_dbi + params.g_rx_dbi - params.pl_fs_d0
        - slope * np.log10(kd) - (x_nlos - x_los) * p_blk - x_los
    )


def sector_gain_db(azimuth, n_sec: int, peak_dbi: float, floor_db: float, orientation=0.0):
    """Gain of every sector towards ``azimuth``; shape (..., n_sec).

    Raised-cosine mainlobe of half-width one sector (-3 dB at the sector
    edge), clipped at ``floor_db`` below the peak.
    """
    bw = 2 * np.pi / n_sec
    centers = orientation + bw * np.arange(n_sec)
    delta = np.angle(np.exp(1j * (np.asarray(azimuth)[..., None] - centers)))
    rc = np.where(np.abs(delta) < bw, 0.5 * (1 + np.cos(np.pi * delta / bw)), 0.0)
    lin = np.maximum(rc, 10 ** (floor_db / 10))
    return peak_dbi + 10 * np.log10(lin)


def shadow_field(env: Environment) -> np.ndarray:
    """Unit-variance shadow draws z[bs, node], frozen by ``env.seed``.

    Depends only on the grid, BS count, seed and correlation length, so
    adding or removing obstacles never reshuffles it.
    """
    rng = np.random.default_rng(np.random.SeedSequence([env.seed, 0x5AD0]))
    g = env.grid
    z = rng.standard_normal((len(env.base_stations),) + g.dims)
    sig = env.params.shadow_corr_m / g.spacing
    if sig > 0:
        z = np.stack([ndimage.gaussian_filter(zi, sig, mode="nearest") for zi in z])
        flat = z.reshape(len(z), -1)
        flat = (flat - flat.mean(axis=1, keepdims=True)) / np.maximum(flat.std(axis=1, keepdims=True), 1e-12)
        return flat
    return z.reshape(len(z), -1)


def link_budget(env: Environment, nodes=None, z=None):
    """Per-BS link terms for the given nodes.

    Returns (gain_bs, gain_ue, loss) with shapes (n_bs, n, n_sec_bs),
    (n_bs, n, n_sec_ue) and (n_bs, n); received power of beam
    (b, sb, su) is tx + gain_bs[b, :, sb] + gain_ue[b, :, su] - loss[b].
    """
    g = env.grid
    p = env.params
    nodes = np.arange(g.n_nodes) if nodes is None else np.asarray(nodes)
    pos = g.positions[nodes]
    z = shadow_field(env)[:, nodes] if z is None else z
    gb, gu, loss = [], [], []
    for b, bs in enumerate(env.base_stations):
        vec = pos - np.asarray(bs.position)
        d = np.linalg.norm(vec, axis=1)
        az = np.arctan2(vec[:, 1], vec[:, 0])
        gb.append(sector_gain_db(az, env.n_sec_bs, p.g_tx_dbi, p.sidelobe_floor_db, bs.orientation))
        gu.append(sector_gain_db(az + np.pi, env.n_sec_ue, p.g_rx_dbi, p.sidelobe_floor_db))
        hits = segment_box_hits(pos, bs.position, list(env.obstacles))
        los = ~hits.any(axis=1)
        pen = hits.astype(float) @ np.array([o.loss_db for o in env.obstacles]) if env.obstacles else 0.0
        shadow = np.where(los, p.sigma_los, p.sigma_nlos) * z[b]
        loss.append(path_loss(d, los, p, shadow) + pen)
    return np.stack(gb), np.stack(gu), np.stack(loss)


def power_table(env: Environment, nodes=None) -> np.ndarray:
    """Received power (dBm) for every beam: shape (n, n_beams), beam_id order."""
    gb, gu, loss = link_budget(env, nodes)
    tot = env.params.tx_power_dbm + gb[:, :, :, None] + gu[:, :, None, :] - loss[:, :, None, None]
    n = tot.shape[1]
    return tot.transpose(1, 0, 2, 3).reshape(n, -1)


def argmax_beams(table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best beam per row; ties resolve to the smallest beam_id."""
    best = np.argmax(table, axis=1)
    return best, table[np.arange(len(table)), best]


def sweep_ground_truth(env: Environment, chunk: int = 4096) -> GroundTruthField:
    """Exhaustive (BS, BS sector, UE sector) sweep at every grid node."""
    n = env.grid.n_nodes
    z = shadow_field(env)
    ids = np.empty(n, dtype=np.int64)
    pw = np.empty(n)
    for start in range(0, n, chunk):
        nodes = np.arange(start, min(n, start + chunk))
        gb, gu, loss = link_budget(env, nodes, z[:, nodes])
        tot = env.params.tx_power_dbm + gb[:, :, :, None] + gu[:, :, None, :] - loss[:, :, None, None]
        ids[nodes], pw[nodes] = argmax_beams(tot.transpose(1, 0, 2, 3).reshape(len(nodes), -1))
    return GroundTruthField(ids, pw, env.space)


def add_blockage(env: Environment, obstacle: Box, before: GroundTruthField | None = None):
    """Insert an obstacle and report which nodes changed their best beam."""
    before = sweep_ground_truth(env) if before is None else before
    env2 = env.with_obstacle(obstacle)
    after = sweep_ground_truth(env2)
    changed = np.nonzero(after.beam_id != before.beam_id)[0]
    return env2, after, changed


def noisy_ground_truth(env: Environment, sigma_bs: float, sigma_sec: float, rng) -> GroundTruthField:
    """Sweep with Gaussian dB noise on the measured powers.

    ``sigma_bs`` perturbs each (node, BS) link as a whole; ``sigma_sec`` adds
    independent noise per BS-side and UE-side sector measurement.
    """
    n = env.grid.n_nodes
    gb, gu, loss = link_budget(env)
    nb = len(env.base_stations)
    loss = loss + sigma_bs * rng.standard_normal((nb, n))
    gb = gb + sigma_sec * rng.standard_normal(gb.shape)
    gu = gu + sigma_sec * rng.standard_normal(gu.shape)
    tot = env.params.tx_power_dbm + gb[:, :, :, None] + gu[:, :, None, :] - loss[:, :, None, None]
    ids, pw = argmax_beams(tot.transpose(1, 0, 2, 3).reshape(n, -1))
    return GroundTruthField(ids, pw, env.space)
