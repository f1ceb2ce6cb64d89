"""File formats: environment JSON, ground-truth and beam-map tables, parameter checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from pathlib import Path

import numpy as np

from .channel import BaseStation, Box, ChannelParams, Environment, GroundTruthField
from .crf import CrfParams, PriorConfig
from .grid import Grid3D, build_grid
from .labels import BeamSelectionMap, LabelSpace

CHECKPOINT_HEADER = "inferbeam-theta"
CHECKPOINT_VERSION = 1


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# ---------------------------------------------------------------------------
# environments


def environment_to_dict(env: Environment) -> dict:
    g = env.grid
    return {
        "grid": {"dims": list(g.dims), "spacing": g.spacing, "origin": list(g.origin)},
        "base_stations": [{"position": list(b.position), "orientation": b.orientation} for b in env.base_stations],
        "n_sec_bs": env.n_sec_bs,
        "n_sec_ue": env.n_sec_ue,
        "obstacles": [{"lo": list(o.lo), "hi": list(o.hi), "loss_db": o.loss_db} for o in env.obstacles],
        "params": dataclasses.asdict(env.params),
        "seed": env.seed,
    }


def environment_from_dict(d: dict) -> Environment:
    g = d["grid"]
    grid = build_grid(g["dims"], g["spacing"], g.get("origin", (0.0, 0.0, 0.0)))
    bss = tuple(BaseStation(tuple(float(x) for x in b["position"]), float(b.get("orientation", 0.0))) for b in d["base_stations"])
    obs = tuple(Box(tuple(o["lo"]), tuple(o["hi"]), float(o["loss_db"])) for o in d.get("obstacles", []))
    params = ChannelParams(**d.get("params", {}))
    return Environment(grid, bss, int(d["n_sec_bs"]), int(d["n_sec_ue"]), obs, params, int(d.get("seed", 0)))


def save_environment(env: Environment, path):
    Path(path).write_text(json.dumps(environment_to_dict(env), indent=2, sort_keys=True) + "\n")


def load_environment(path) -> Environment:
    return environment_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# tables


def write_csv(path, header, rows):
    """CSV with repr-formatted floats, so identical values give identical bytes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) if isinstance(r, dict) else _fmt(x) for h, x in zip(header, r if not isinstance(r, dict) else header)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


GT_HEADER = ["node_index", "i", "j", "l", "bs_id", "sec_bs_id", "sec_ue_id", "beam_id", "power_dbm"]


def ground_truth_rows(grid: Grid3D, gt: GroundTruthField):
    bs, sb, su = gt.space.split_beam(gt.beam_id)
    ijk = grid.all_coords
    for v in range(grid.n_nodes):
        yield [v, int(ijk[v, 0]), int(ijk[v, 1]), int(ijk[v, 2]), int(bs[v]), int(sb[v]), int(su[v]), int(gt.beam_id[v]), float(gt.power_dbm[v])]


def save_ground_truth(grid: Grid3D, gt: GroundTruthField, path):
    return write_csv(path, GT_HEADER, ground_truth_rows(grid, gt))


def load_ground_truth(path, space: LabelSpace) -> GroundTruthField:
    rows = read_csv(path)
    rows.sort(key=lambda r: int(r["node_index"]))
    ids = np.array([int(r["beam_id"]) for r in rows], dtype=np.int64)
    pw = np.array([float(r["power_dbm"]) for r in rows])
    return GroundTruthField(ids, pw, space)


MAP_HEADER = ["node_index", "rank", "bs_id", "sec_bs_id", "sec_ue_id", "probability"]


def beam_map_rows(B: BeamSelectionMap, nodes=None, top: int | None = None):
    nodes = range(B.n_nodes) if nodes is None else nodes
    for v in nodes:
        order = B.order(v)
        if top is not None:
            order = order[:top]
        bs, sb, su = B.space.split_beam(order)
        for r, b in enumerate(order):
            yield [int(v), r + 1, int(bs[r]), int(sb[r]), int(su[r]), float(B.probs[v, b])]


def save_beam_map(B: BeamSelectionMap, path, nodes=None, top: int | None = None):
    return write_csv(path, MAP_HEADER, beam_map_rows(B, nodes, top))


def save_marginals(probs: np.ndarray, path):
    rows = ([v, x, float(probs[v, x])] for v in range(probs.shape[0]) for x in range(probs.shape[1]))
    return write_csv(path, ["node_index", "label", "probability"], rows)


def save_samples(nodes, beams, space: LabelSpace, path):
    bs, sb, su = space.split_beam(np.asarray(beams))
    rows = ([int(v), int(b), int(s), int(u)] for v, b, s, u in zip(nodes, bs, sb, su))
    return write_csv(path, ["node_index", "bs_id", "sec_bs_id", "sec_ue_id"], rows)


def load_samples(path, space: LabelSpace):
    rows = read_csv(path)
    nodes = np.array([int(r["node_index"]) for r in rows], dtype=np.int64)
    beams = np.array([int(space.beam_id(int(r["bs_id"]), int(r["sec_bs_id"]), int(r["sec_ue_id"]))) for r in rows], dtype=np.int64)
    return nodes, beams


# ---------------------------------------------------------------------------
# parameter checkpoints


def dump_params(params: CrfParams, grid: Grid3D | None = None) -> str:
    """Versioned text checkpoint: K, w, edge penalties (or tied scalar), prior block."""
    lines = [f"{CHECKPOINT_HEADER} v{CHECKPOINT_VERSION}", f"K {params.K}"]
    lines.append("w " + " ".join(_fmt(x) for x in np.asarray(params.w, float)))
    m = np.asarray(params.m, float)
    if params.tied:
        lines.append(f"m tied {_fmt(m[0])}")
    else:
        if grid is None:
            raise ValueError("per-edge penalties need the grid for the edge table")
        lines.append(f"m edges {len(m)}")
        for (u, v), x in zip(grid.edges, m):
            lines.append(f"{int(u)} {int(v)} {_fmt(x)}")
    p = params.prior
    lines.append("prior mu_w " + " ".join(_fmt(x) for x in np.asarray(p.mu_w, float)))
    lines.append("prior sigma_w " + " ".join(_fmt(x) for x in np.asarray(p.sigma_w, float)))
    lines.append(f"prior mu_m {_fmt(p.mu_m)}")
    lines.append(f"prior sigma_m {_fmt(p.sigma_m)}")
    return "\n".join(lines) + "\n"


def parse_params(text: str, grid: Grid3D | None = None) -> CrfParams:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(CHECKPOINT_HEADER):
        raise ValueError("not a parameter checkpoint")
    version = int(lines[0].split()[1].lstrip("v"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    it = iter(lines[1:])
    K = int(next(it).split()[1])
    w = np.array([float(x) for x in next(it).split()[1:]])
    if len(w) != K:
        raise ValueError("checkpoint w length does not match K")
    head = next(it).split()
    if head[1] == "tied":
        m, tied = np.array([float(head[2])]), True
    else:
        n = int(head[2])
        rows = [next(it).split() for _ in range(n)]
        m, tied = np.array([float(r[2]) for r in rows]), False
        if grid is not None:
            uv = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(-1, 2)
            if not np.array_equal(uv, grid.edges):
                raise ValueError("checkpoint edge table does not match the grid")
    prior = {}
    for ln in it:
        parts = ln.split()
        prior[parts[1]] = [float(x) for x in parts[2:]]
    pc = PriorConfig(np.array(prior["mu_w"]), np.array(prior["sigma_w"]), prior["mu_m"][0], prior["sigma_m"][0])
    return CrfParams(w, m, pc, tied)


def save_params(params: CrfParams, path, grid: Grid3D | None = None):
    Path(path).write_text(dump_params(params, grid))


def load_params(path, grid: Grid3D | None = None) -> CrfParams:
    return parse_params(Path(path).read_text(), grid)
