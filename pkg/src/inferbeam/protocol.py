"""Backend inference, online beam alignment and beam adjustment.

All timing runs on a virtual millisecond clock. A trial beacons from the
entry's BS over its sector range and waits one reply window, so it costs
2 * T_frame; the sector-level-sweep fallback costs one frame per BS and UE
sector.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .channel import GroundTruthField
from .crf import CrfParams, Evidence, build_model, exact_marginals, run_lbp
from .grid import Grid3D, PHopTable
from .labels import BeamSelectionMap, LabelSpace, sector_within

log = logging.getLogger(__name__)

# (min SNR dB, Mbps): single-carrier 60 GHz rate steps, capped by Shannon below
RATE_TABLE = (
    (1.0, 385.0), (2.5, 770.0), (3.5, 962.5), (4.5, 1155.0), (5.5, 1251.25), (6.5, 1540.0),
    (8.0, 1925.0), (9.5, 2310.0), (10.5, 2502.5), (12.0, 3080.0), (14.0, 3850.0), (16.0, 4620.0),
)
BANDWIDTH_HZ = 2.16e9
NOISE_FLOOR_DBM = -174.0 + 10 * np.log10(BANDWIDTH_HZ) + 10.0  # 10 dB noise figure


@dataclass
class ProtocolConstants:
    xi_bs: int = 1
    xi_ue: int = 1
    p_th: float = 1e-6
    beta: float = 5.0
    beta_unit: str = "cells"  # cells | meters
    alpha_th_mbps: float = 1540.0
    t_measure_ms: float = 10.0
    t_frame_ms: float = 1.0
    t_beacon_ms: float = 100.0
    t_brp_ms: float = 2.0
    t_loc_ms: float = 10.0
    t_control_ms: float = 1.0
    obap_scan: str = "top"  # top | next: where OBAP resumes in the sorted map

    @property
    def rtt_ms(self) -> float:
        return 2 * self.t_frame_ms

    def beta_m(self, grid: Grid3D) -> float:
        if self.beta_unit == "cells":
            return self.beta * grid.spacing
        if self.beta_unit == "meters":
            return self.beta
        raise ValueError(f"unknown beta unit {self.beta_unit!r}")

    def sls_ms(self, space: LabelSpace) -> float:
        return (space.n_sec_bs + space.n_sec_ue) * self.t_frame_ms

    def traditional_ms(self, space: LabelSpace) -> float:
        """Beacon wait, full sweep in both directions, then BRP."""
        return self.t_beacon_ms + self.sls_ms(space) + self.t_brp_ms


def throughput_model(rx_power_dbm, noise_floor_dbm: float = NOISE_FLOOR_DBM) -> np.ndarray:
    """Stepwise rate (Mbps) for a received power; 0 below the lowest step."""
    snr = np.asarray(rx_power_dbm, dtype=float) - noise_floor_dbm
    thr = np.array([t for t, _ in RATE_TABLE])
    rates = np.array([r for _, r in RATE_TABLE])
    idx = np.searchsorted(thr, snr, side="right") - 1
    step = np.where(idx >= 0, rates[np.clip(idx, 0, None)], 0.0)
    shannon = BANDWIDTH_HZ * np.log2(1 + 10 ** (snr / 10)) / 1e6
    return np.minimum(step, shannon)


# ---------------------------------------------------------------------------
# clock


@dataclass
class Event:
    time_ms: float
    kind: str
    detail: dict = field(default_factory=dict)


class Clock:
    def __init__(self, start_ms: float = 0.0):
        self.now = float(start_ms)
        self.events: list[Event] = []

    def advance(self, dt_ms: float, kind: str, **detail):
        if dt_ms < 0:
            raise ValueError("time cannot run backwards")
        self.now += dt_ms
        self.events.append(Event(self.now, kind, detail))


# ---------------------------------------------------------------------------
# backend inference


class _WarmStarts:
    """LBP messages from the previous run per CRF, keyed by original label."""

    def __init__(self):
        self.store: dict = {}

    def get(self, key, col_labels: np.ndarray, mult: np.ndarray):
        old = self.store.get(key)
        if old is None:
            return None
        old_cols, old_msgs = old
        lookup = {int(c): i for i, c in enumerate(old_cols)}
        pooled = lookup.get(-1)
        idx = []
        for c in col_labels:
            j = lookup.get(int(c), pooled)
            if j is None:
                return None
            idx.append(j)
        msg = np.exp(old_msgs[:, idx])
        msg /= (msg @ mult.astype(float))[:, None]
        return np.log(msg)

    def put(self, key, col_labels, log_msgs):
        self.store[key] = (np.array(col_labels), log_msgs)


@dataclass
class InferenceOptions:
    engine: str = "lbp"  # lbp | exact
    damping: float = 0.5
    max_iters: int = 200
    tol: float = 1e-6
    schedule: str = "flooding"


def _marginals(grid, table, params, evidence, opts: InferenceOptions, warm: _WarmStarts | None, key):
    if opts.engine == "exact":
        model = build_model(grid, table, params, evidence)
        _, marg = exact_marginals(model)
        return marg
    model = build_model(grid, table, params, evidence, compress=True)
    init = warm.get(key, model.col_labels, model.mult) if warm is not None else None
    res = run_lbp(model, opts.damping, opts.max_iters, opts.tol, init, opts.schedule)
    if warm is not None:
        warm.put(key, model.col_labels, res.log_messages)
    if not res.converged:
        log.debug("LBP for %s stopped unconverged after %d iterations", key, res.iterations)
    return model.expand(res.beliefs)


def bia(
    sample_nodes,
    sample_beams,
    theta_bs: CrfParams,
    theta_sec: CrfParams,
    grid: Grid3D,
    table: PHopTable,
    space: LabelSpace,
    opts: InferenceOptions | None = None,
    warm: _WarmStarts | None = None,
) -> BeamSelectionMap:
    """Cascaded inference: P(BS) from the BS CRF, P(sector tuple | BS) per BS, joint product.

    A BS with no samples gets a uniform sector-tuple conditional.
    """
    opts = opts or InferenceOptions()
    nodes = np.asarray(sample_nodes, dtype=np.int64)
    beams = np.asarray(sample_beams, dtype=np.int64)
    if len(nodes) == 0:
        raise ValueError("backend inference needs at least one sample")
    bs, _, _ = space.split_beam(beams)
    sec = beams % space.n_sec
    p_bs = _marginals(grid, table, theta_bs, Evidence.of(nodes, bs, space.n_bs), opts, warm, "bs")
    joint = np.empty((grid.n_nodes, space.n_bs, space.n_sec))
    for x in range(space.n_bs):
        sel = bs == x
        if not sel.any():
            cond = np.full((grid.n_nodes, space.n_sec), 1.0 / space.n_sec)
        else:
            cond = _marginals(grid, table, theta_sec, Evidence.of(nodes[sel], sec[sel], space.n_sec), opts, warm, ("sec", x))
        joint[:, x, :] = cond * p_bs[:, x, None]
    return BeamSelectionMap(joint.reshape(grid.n_nodes, -1), space)


# ---------------------------------------------------------------------------
# online protocol


def trial_success(entry_beam: int, true_beam: int, space: LabelSpace, xi_bs: int, xi_ue: int) -> bool:
    """Same BS, and both true sectors inside the entry's +-xi ranges."""
    eb, es, eu = space.split_beam(entry_beam)
    tb, ts, tu = space.split_beam(true_beam)
    return bool(
        eb == tb and sector_within(es, ts, xi_bs, space.n_sec_bs) and sector_within(eu, tu, xi_ue, space.n_sec_ue)
    )


@dataclass
class TrialRecord:
    session: int
    phase: str  # obp | obap
    t_start_ms: float
    t_end_ms: float
    rank: int
    beam_id: int
    probability: float
    outcome: str  # ack | timeout | sls


@dataclass
class UeSession:
    session_id: int
    true_location: np.ndarray
    reported_location: np.ndarray
    node: int  # grid node nearest the reported location
    true_node: int  # grid node nearest the true location
    n_trials: int = 0
    outcome: str = ""  # inferred | sls
    beam_id: int = -1
    in_use_entry: int = -1
    removed: set = field(default_factory=set)
    elapsed_ms: float = 0.0


@dataclass
class AlignResult:
    beam_id: int
    n_trials: int
    used_sls: bool
    elapsed_ms: float
    samples_updated: bool


class InferBeamState:
    """Backend state: trained CRFs, the sample set and the cached beam map."""

    def __init__(
        self,
        grid: Grid3D,
        table: PHopTable,
        space: LabelSpace,
        theta_bs: CrfParams,
        theta_sec: CrfParams,
        constants: ProtocolConstants | None = None,
        options: InferenceOptions | None = None,
    ):
        self.grid, self.table, self.space = grid, table, space
        self.theta_bs, self.theta_sec = theta_bs, theta_sec
        self.constants = constants or ProtocolConstants()
        self.options = options or InferenceOptions()
        self.samples: dict[int, int] = {}
        self._map: BeamSelectionMap | None = None
        self._warm = _WarmStarts()
        self.n_inferences = 0
        self.trace: list[TrialRecord] = []

    def set_samples(self, nodes, beams):
        self.samples = {int(v): int(b) for v, b in zip(nodes, beams)}
        if len(self.samples) != len(nodes):
            raise ValueError("duplicate sample nodes")
        self._map = None

    def add_sample(self, node: int, beam: int) -> list[int]:
        """Insert an SLS-verified sample, erasing older samples closer than beta."""
        pos = self.grid.positions
        beta = self.constants.beta_m(self.grid)
        erased = [v for v in self.samples if np.linalg.norm(pos[v] - pos[node]) < beta or v == node]
        for v in erased:
            del self.samples[v]
        self.samples[int(node)] = int(beam)
        self._map = None
        return erased

    def beam_map(self) -> BeamSelectionMap:
        if self._map is None:
            nodes = np.fromiter(self.samples.keys(), dtype=np.int64, count=len(self.samples))
            beams = np.fromiter(self.samples.values(), dtype=np.int64, count=len(self.samples))
            order = np.argsort(nodes)
            self._map = bia(
                nodes[order], beams[order], self.theta_bs, self.theta_sec, self.grid, self.table, self.space,
                self.options, self._warm,
            )
            self.n_inferences += 1
        return self._map

    def new_session(self, session_id: int, true_location, reported_location) -> UeSession:
        return UeSession(
            session_id,
            np.asarray(true_location, float),
            np.asarray(reported_location, float),
            int(self.grid.nearest_node(reported_location)),
            int(self.grid.nearest_node(true_location)),
        )

    def _scan(self, session: UeSession, true_beam: int, clock: Clock, phase: str, start_rank: int = 1):
        """Try sorted entries above P_TH; returns (hit entry or None, trials)."""
        c = self.constants
        B = self.beam_map()
        v = session.node
        probs = B.probs[v]
        trials = 0
        for rank, b in enumerate(B.order(v), start=1):
            b = int(b)
            if rank < start_rank or b in session.removed:
                continue
            if not probs[b] > c.p_th:
                break
            trials += 1
            t0 = clock.now
            ok = trial_success(b, true_beam, self.space, c.xi_bs, c.xi_ue)
            clock.advance(2 * c.t_frame_ms, "trial", session=session.session_id, beam=b, ack=ok)
            self.trace.append(TrialRecord(session.session_id, phase, t0, clock.now, rank, b, float(probs[b]), "ack" if ok else "timeout"))
            if ok:
                return b, trials
        return None, trials

    def _sls(self, session, true_beam, clock, phase):
        t0 = clock.now
        clock.advance(self.constants.sls_ms(self.space), "sls", session=session.session_id, beam=true_beam)
        self.trace.append(TrialRecord(session.session_id, phase, t0, clock.now, 0, int(true_beam), 0.0, "sls"))

    def obp(self, session: UeSession, gt: GroundTruthField, clock: Clock, update_samples: bool = True) -> AlignResult:
        """Align a new UE from its reported location; SLS when the map runs dry."""
        c = self.constants
        start = clock.now
        clock.advance(c.t_loc_ms, "localized", session=session.session_id, node=session.node)
        true_beam = int(gt.beam_id[session.true_node])
        hit, trials = self._scan(session, true_beam, clock, "obp")
        used_sls = hit is None
        if used_sls:
            self._sls(session, true_beam, clock, "obp")
        clock.advance(c.t_brp_ms, "brp", session=session.session_id)
        session.n_trials = trials
        session.outcome = "sls" if used_sls else "inferred"
        session.beam_id = true_beam
        session.in_use_entry = true_beam if used_sls else hit
        session.elapsed_ms = clock.now - start
        updated = False
        if used_sls and update_samples:
            self.add_sample(session.node, true_beam)
            updated = True
        return AlignResult(true_beam, trials, used_sls, session.elapsed_ms, updated)

    def obap(self, session: UeSession, new_true_beam: int, clock: Clock) -> AlignResult:
        """Drop the entry in use and rescan the same node's map without re-localizing."""
        c = self.constants
        start = clock.now
        clock.advance(c.t_control_ms, "reconnect", session=session.session_id)
        start_rank = 1
        if c.obap_scan == "next" and not session.outcome == "sls":
            start_rank = self.beam_map().rank_of(session.node, session.in_use_entry) + 1
        session.removed.add(int(session.in_use_entry))
        hit, trials = self._scan(session, int(new_true_beam), clock, "obap", start_rank)
        used_sls = hit is None
        if used_sls:
            self._sls(session, new_true_beam, clock, "obap")
        clock.advance(c.t_brp_ms, "brp", session=session.session_id)
        session.beam_id = int(new_true_beam)
        session.in_use_entry = int(new_true_beam) if used_sls else hit
        return AlignResult(int(new_true_beam), trials, used_sls, clock.now - start, False)

    def obap_needed(self, in_use_power_dbm: float) -> bool:
        return bool(throughput_model(in_use_power_dbm) < self.constants.alpha_th_mbps)


def sls_sweep(gt: GroundTruthField, node: int, constants: ProtocolConstants) -> tuple[int, float]:
    """Exhaustive sweep result at ``node`` and the air time it costs."""
    return int(gt.beam_id[node]), constants.sls_ms(gt.space)


def trace_csv(records: list[TrialRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["session", "phase", "t_start_ms", "t_end_ms", "rank", "beam_id", "probability", "outcome"])
    for r in records:
        w.writerow([r.session, r.phase, f"{r.t_start_ms:.3f}", f"{r.t_end_ms:.3f}", r.rank, r.beam_id, f"{r.probability:.6e}", r.outcome])
    return buf.getvalue()
