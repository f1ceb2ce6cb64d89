"""3D lattice geometry: node indexing, 6-connected edges and p-hop shells.

A p-hop rank groups lattice offsets by Euclidean length: rank ``k`` is the
k-th smallest distinct squared length realizable inside the grid, so all
offsets at the same distance share a rank.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

DEFAULT_MAX_RANK = 8


@dataclass(frozen=True)
class PHopTable:
    """Offset shells per p-hop rank.

    ``radii[k-1]`` is the squared length of rank ``k``; ``shells[k-1]`` is an
    (n, 3) int array of the offsets at that length.
    """

    max_rank: int
    radii: tuple[int, ...]
    shells: tuple[np.ndarray, ...]
    _lookup: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def n_ranks(self) -> int:
        return len(self.radii)

    def rank_of_sqdist(self, sq: int) -> int | None:
        if sq == 0:
            return 0
        return self._lookup.get(int(sq))


def build_phop_table(dims: tuple[int, int, int], max_rank: int = DEFAULT_MAX_RANK) -> PHopTable:
    """Enumerate offset shells for a grid of the given shape up to ``max_rank``.

    Only offsets that fit inside the grid extents are considered, so a flat
    grid (c == 1) gets the planar ranking (squared lengths 1, 2, 4, 5, 8, ...).
    """
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    ext = np.asarray(dims) - 1
    r = 1
    while True:
        lim = np.minimum(ext, r)
        axes = [np.arange(-l, l + 1) for l in lim]
        off = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        sq = (off**2).sum(axis=1)
        keep = (sq > 0) & (sq <= r * r)
        distinct = np.unique(sq[keep])
        if len(distinct) >= max_rank or r * r >= int((ext**2).sum()):
            break
        r += 1
    # every offset with sq <= r*r is present, so the first ranks are complete
    radii = tuple(int(d) for d in distinct[:max_rank])
    shells = []
    for d in radii:
        shell = off[sq == d]
        order = np.lexsort((shell[:, 2], shell[:, 1], shell[:, 0]))
        shells.append(shell[order].astype(np.int64))
    lookup = {d: k + 1 for k, d in enumerate(radii)}
    return PHopTable(max_rank, radii, tuple(shells), lookup)


def phop_distance(offset, table: PHopTable) -> int | None:
    """p-hop rank of an integer offset, 0 for the zero offset, None past the table."""
    sq = int(np.sum(np.asarray(offset, dtype=np.int64) ** 2))
    return table.rank_of_sqdist(sq)


@dataclass(frozen=True)
class Grid3D:
    dims: tuple[int, int, int]
    spacing: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def n_nodes(self) -> int:
        a, b, c = self.dims
        return a * b * c

    def index(self, i, j, l):
        _, b, c = self.dims
        return (np.asarray(i) * b + np.asarray(j)) * c + np.asarray(l)

    def coords(self, node):
        _, b, c = self.dims
        node = np.asarray(node)
        return np.stack([node // (b * c), (node // c) % b, node % c], axis=-1)

    def in_bounds(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk)
        return np.all((ijk >= 0) & (ijk < np.asarray(self.dims)), axis=-1)

    @cached_property
    def all_coords(self) -> np.ndarray:
        return self.coords(np.arange(self.n_nodes))

    @cached_property
    def positions(self) -> np.ndarray:
        """World coordinates (n_nodes, 3) in meters."""
        return np.asarray(self.origin) + self.spacing * self.all_coords

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected 6-connected edges as an (E, 2) array with u < v, sorted."""
        idx = np.arange(self.n_nodes).reshape(self.dims)
        parts = [
            np.stack([idx[:-1, :, :].ravel(), idx[1:, :, :].ravel()], axis=1),
            np.stack([idx[:, :-1, :].ravel(), idx[:, 1:, :].ravel()], axis=1),
            np.stack([idx[:, :, :-1].ravel(), idx[:, :, 1:].ravel()], axis=1),
        ]
        e = np.concatenate(parts).astype(np.int64)
        order = np.lexsort((e[:, 1], e[:, 0]))
        return e[order]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def parity(self) -> np.ndarray:
        """Checkerboard color of each node; edges always join opposite colors."""
        return self.all_coords.sum(axis=1) % 2

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def nearest_node(self, point) -> np.ndarray:
        """Snap world coordinates (..., 3) to the closest node, clipped to the grid."""
        rel = (np.asarray(point, dtype=float) - np.asarray(self.origin)) / self.spacing
        ijk = np.clip(np.rint(rel).astype(np.int64), 0, np.asarray(self.dims) - 1)
        return self.index(ijk[..., 0], ijk[..., 1], ijk[..., 2])

    @cached_property
    def extent(self) -> np.ndarray:
        """Upper world corner of the lattice (last node position)."""
        return np.asarray(self.origin) + self.spacing * (np.asarray(self.dims) - 1)


def build_grid(dims, spacing: float, origin=(0.0, 0.0, 0.0)) -> Grid3D:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"grid dims must be three positive integers, got {dims}")
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    return Grid3D(dims, float(spacing), tuple(float(o) for o in origin))


def shell_nodes(grid: Grid3D, v: int, k: int, table: PHopTable) -> np.ndarray:
    """In-bounds nodes at p-hop rank ``k`` from node ``v``, ascending."""
    if not 1 <= k <= table.max_rank:
        raise ValueError(f"rank {k} outside 1..{table.max_rank}")
    if k > table.n_ranks:
        return np.empty(0, dtype=np.int64)
    ijk = grid.coords(v) + table.shells[k - 1]
    ijk = ijk[grid.in_bounds(ijk)]
    return np.sort(grid.index(ijk[:, 0], ijk[:, 1], ijk[:, 2]))


def shell_pairs(grid: Grid3D, table: PHopTable, k: int) -> tuple[np.ndarray, np.ndarray]:
    """All ordered (v, s) node pairs at rank ``k`` as two index arrays."""
    src_all, dst_all = [], []
    coords = grid.all_coords
    for off in table.shells[k - 1]:
        tgt = coords + off
        ok = grid.in_bounds(tgt)
        src_all.append(np.nonzero(ok)[0])
        dst_all.append(grid.index(tgt[ok, 0], tgt[ok, 1], tgt[ok, 2]))
    if not src_all:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(src_all), np.concatenate(dst_all)
