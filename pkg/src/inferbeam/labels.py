"""Beam label spaces, circular sector arithmetic and the beam selection map."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class LabelSpace:
    n_bs: int
    n_sec_bs: int
    n_sec_ue: int

    def __post_init__(self):
        if min(self.n_bs, self.n_sec_bs, self.n_sec_ue) < 1:
            raise ValueError("label space counts must be >= 1")

    @property
    def n_sec(self) -> int:
        """Size of the sector-tuple space |X^Sec|."""
        return self.n_sec_bs * self.n_sec_ue

    @property
    def n_beams(self) -> int:
        return self.n_bs * self.n_sec

    def sec_id(self, sec_bs, sec_ue):
        return np.asarray(sec_bs) * self.n_sec_ue + np.asarray(sec_ue)

    def split_sec(self, sec_id):
        sec_id = np.asarray(sec_id)
        return sec_id // self.n_sec_ue, sec_id % self.n_sec_ue

    def beam_id(self, bs, sec_bs, sec_ue):
        return np.asarray(bs) * self.n_sec + self.sec_id(sec_bs, sec_ue)

    def split_beam(self, beam_id):
        """beam_id -> (bs, sec_bs, sec_ue)."""
        beam_id = np.asarray(beam_id)
        bs, sec = beam_id // self.n_sec, beam_id % self.n_sec
        sb, su = self.split_sec(sec)
        return bs, sb, su

    def contains(self, bs, sec_bs, sec_ue) -> bool:
        return 0 <= bs < self.n_bs and 0 <= sec_bs < self.n_sec_bs and 0 <= sec_ue < self.n_sec_ue


@dataclass(frozen=True)
class BeamTuple:
    bs_id: int
    sec_bs_id: int
    sec_ue_id: int

    def beam_id(self, space: LabelSpace) -> int:
        return int(space.beam_id(self.bs_id, self.sec_bs_id, self.sec_ue_id))

    @classmethod
    def from_beam_id(cls, beam_id: int, space: LabelSpace) -> "BeamTuple":
        bs, sb, su = space.split_beam(int(beam_id))
        return cls(int(bs), int(sb), int(su))


def sector_add(sec, delta, n_sec):
    """Circular sector arithmetic; sectors n_sec-1 and 0 are adjacent."""
    return (np.asarray(sec) + np.asarray(delta)) % n_sec if np.ndim(sec) else (int(sec) + int(delta)) % n_sec


def sector_range(sec: int, xi: int, n_sec: int) -> list[int]:
    """The 2*xi + 1 consecutive sectors centred on ``sec``."""
    if xi < 0 or 2 * xi + 1 > n_sec:
        raise ValueError(f"sector range xi={xi} too large for {n_sec} sectors")
    return [(sec + d) % n_sec for d in range(-xi, xi + 1)]


def sector_within(a, b, xi: int, n_sec: int):
    """True where sectors ``a`` and ``b`` are at most ``xi`` apart on the circle."""
    diff = np.abs(np.asarray(a) - np.asarray(b)) % n_sec
    return np.minimum(diff, n_sec - diff) <= xi


@dataclass(frozen=True)
class MapEntry:
    bs_id: int
    sec_bs_id: int
    sec_ue_id: int
    probability: float


def sort_map(entries: list[MapEntry]) -> list[MapEntry]:
    """Descending probability; ties go to the lexicographically smaller IDs."""
    return sorted(entries, key=lambda e: (-e.probability, e.bs_id, e.sec_bs_id, e.sec_ue_id))


class BeamSelectionMap:
    """Per-node joint probabilities over the full beam space.

    ``probs[v, beam_id]`` holds P(BS, sector tuple) at node ``v``. Sorted views
    are built lazily per node, since the protocol only reads a handful of them.
    """

    def __init__(self, probs: np.ndarray, space: LabelSpace):
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 2 or probs.shape[1] != space.n_beams:
            raise ValueError("probability table must be (n_nodes, n_beams)")
        self.probs = probs
        self.space = space
        self._order: dict[int, np.ndarray] = {}

    @property
    def n_nodes(self) -> int:
        return self.probs.shape[0]

    def order(self, v: int) -> np.ndarray:
        """beam_ids of node ``v`` sorted by descending probability, ties by beam_id."""
        v = int(v)
        if v not in self._order:
            p = self.probs[v]
            # beam_id order equals (bs, sec_bs, sec_ue) lexicographic order
            self._order[v] = np.lexsort((np.arange(len(p)), -p))
        return self._order[v]

    def sorted_entries(self, v: int) -> list[MapEntry]:
        out = []
        for b in self.order(v):
            bs, sb, su = self.space.split_beam(b)
            out.append(MapEntry(int(bs), int(sb), int(su), float(self.probs[v, b])))
        return out

    def rank_of(self, v: int, beam_id: int) -> int:
        """1-based position of ``beam_id`` in the sorted map of ``v``."""
        return int(np.nonzero(self.order(v) == beam_id)[0][0]) + 1
