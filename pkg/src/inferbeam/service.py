"""HTTP service around the core package."""
from __future__ import annotations

import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException

from . import __version__
from .channel import GroundTruthField, sweep_ground_truth
from .crf import CrfParams
from .experiments import initial_samples
from .grid import build_grid, build_phop_table
from .io import environment_from_dict, parse_params
from .labels import LabelSpace
from .protocol import Clock, InferBeamState, InferenceOptions, ProtocolConstants, bia
from .schemas import (
    AlignRequest, AlignResponse, DeploymentCreate, DeploymentInfo, EnvironmentModel, HealthResponse,
    InferRequest, InferResponse, MapEntryModel, NodeMapModel, ParamsModel, SampleModel, SamplesResponse,
    SweepResponse,
)
from .training import default_prior


def _params(p: ParamsModel | None, K: int, n_edges: int, grid) -> CrfParams:
    prior = default_prior(K)
    if p is None:
        return CrfParams.init(K, n_edges, prior, tied=True)
    if p.checkpoint is not None:
        return parse_params(p.checkpoint, grid)
    if p.w is None or p.m is None:
        raise HTTPException(422, "parameters need either a checkpoint or both w and m")
    return CrfParams(np.array(p.w, float), np.array(p.m, float), prior, p.tied)


def _sample_arrays(samples: list[SampleModel], space: LabelSpace, n_nodes: int):
    nodes = np.array([s.node_index for s in samples], dtype=np.int64)
    for s in samples:
        if not space.contains(s.bs_id, s.sec_bs_id, s.sec_ue_id):
            raise HTTPException(422, f"sample label outside the label space: {s}")
    if nodes.size and nodes.max() >= n_nodes:
        raise HTTPException(422, "sample node outside the grid")
    beams = np.array([int(space.beam_id(s.bs_id, s.sec_bs_id, s.sec_ue_id)) for s in samples], dtype=np.int64)
    return nodes, beams


def _node_maps(B, nodes, top):
    out = []
    for v in nodes:
        order = B.order(v)[:top] if top else B.order(v)
        bs, sb, su = B.space.split_beam(order)
        entries = [
            MapEntryModel(rank=r + 1, bs_id=int(bs[r]), sec_bs_id=int(sb[r]), sec_ue_id=int(su[r]), probability=float(B.probs[v, b]))
            for r, b in enumerate(order)
        ]
        out.append(NodeMapModel(node_index=int(v), entries=entries))
    return out


class _Deployment:
    def __init__(self, state: InferBeamState, gt: GroundTruthField):
        self.state = state
        self.gt = gt
        self.clock = Clock()
        self.n_sessions = 0
        self.lock = threading.Lock()


def create_app() -> FastAPI:
    app = FastAPI(title="inferbeam", version=__version__)
    deployments: dict[str, _Deployment] = {}

    def get(dep_id: str) -> _Deployment:
        if dep_id not in deployments:
            raise HTTPException(404, f"unknown deployment {dep_id}")
        return deployments[dep_id]

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/sweep", response_model=SweepResponse)
    def sweep(env: EnvironmentModel):
        try:
            e = environment_from_dict(env.model_dump())
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        gt = sweep_ground_truth(e)
        return SweepResponse(
            n_nodes=e.grid.n_nodes, beam_id=gt.beam_id.tolist(), bs_id=gt.bs.tolist(), power_dbm=gt.power_dbm.tolist()
        )

    @app.post("/infer", response_model=InferResponse)
    def infer(req: InferRequest):
        grid = build_grid(req.grid.dims, req.grid.spacing, req.grid.origin)
        table = build_phop_table(grid.dims, req.max_rank)
        space = LabelSpace(req.n_bs, req.n_sec_bs, req.n_sec_ue)
        nodes, beams = _sample_arrays(req.samples, space, grid.n_nodes)
        if len(np.unique(nodes)) != len(nodes):
            raise HTTPException(422, "duplicate sample nodes")
        t1 = _params(req.theta_bs, req.max_rank, grid.n_edges, grid)
        t2 = _params(req.theta_sec, req.max_rank, grid.n_edges, grid)
        B = bia(nodes, beams, t1, t2, grid, table, space, InferenceOptions(engine=req.engine))
        query = req.nodes if req.nodes is not None else range(grid.n_nodes)
        if any(not 0 <= v < grid.n_nodes for v in query):
            raise HTTPException(422, "query node outside the grid")
        return InferResponse(maps=_node_maps(B, query, req.top))

    @app.post("/deployments", response_model=DeploymentInfo, status_code=201)
    def create_deployment(req: DeploymentCreate):
        try:
            env = environment_from_dict(req.environment.model_dump())
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        grid = env.grid
        table = build_phop_table(grid.dims, req.max_rank)
        gt = sweep_ground_truth(env)
        t1 = _params(req.theta_bs, req.max_rank, grid.n_edges, grid)
        t2 = _params(req.theta_sec, req.max_rank, grid.n_edges, grid)
        state = InferBeamState(grid, table, env.space, t1, t2, ProtocolConstants(**req.constants.model_dump()))
        if req.samples:
            nodes, beams = _sample_arrays(req.samples, env.space, grid.n_nodes)
        else:
            nodes, beams = initial_samples(grid, gt, req.sample_fraction, np.random.default_rng(req.seed))
        try:
            state.set_samples(nodes, beams)
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        dep_id = uuid.uuid4().hex[:12]
        deployments[dep_id] = _Deployment(state, gt)
        return DeploymentInfo(deployment_id=dep_id, n_nodes=grid.n_nodes, n_samples=len(state.samples), n_beams=env.space.n_beams)

    @app.post("/deployments/{dep_id}/align", response_model=AlignResponse)
    def align(dep_id: str, req: AlignRequest):
        dep = get(dep_id)
        with dep.lock:
            st = dep.state
            reported = req.reported_location if req.reported_location is not None else req.true_location
            sess = st.new_session(dep.n_sessions, req.true_location, reported)
            dep.n_sessions += 1
            res = st.obp(sess, dep.gt, dep.clock)
        bs, sb, su = st.space.split_beam(res.beam_id)
        return AlignResponse(
            session_id=sess.session_id, node_index=sess.node, bs_id=int(bs), sec_bs_id=int(sb), sec_ue_id=int(su),
            n_trials=res.n_trials, used_sls=res.used_sls, elapsed_ms=res.elapsed_ms, samples_updated=res.samples_updated,
        )

    @app.get("/deployments/{dep_id}/beam-map", response_model=InferResponse)
    def beam_map(dep_id: str, node: int, top: int = 10):
        dep = get(dep_id)
        if not 0 <= node < dep.state.grid.n_nodes:
            raise HTTPException(422, "node outside the grid")
        with dep.lock:
            B = dep.state.beam_map()
        return InferResponse(maps=_node_maps(B, [node], top))

    @app.get("/deployments/{dep_id}/samples", response_model=SamplesResponse)
    def samples(dep_id: str):
        st = get(dep_id).state
        out = []
        for v in sorted(st.samples):
            bs, sb, su = st.space.split_beam(st.samples[v])
            out.append(SampleModel(node_index=v, bs_id=int(bs), sec_bs_id=int(sb), sec_ue_id=int(su)))
        return SamplesResponse(samples=out)

    @app.put("/deployments/{dep_id}/samples", response_model=SamplesResponse)
    def replace_samples(dep_id: str, body: SamplesResponse):
        dep = get(dep_id)
        st = dep.state
        nodes, beams = _sample_arrays(body.samples, st.space, st.grid.n_nodes)
        with dep.lock:
            try:
                st.set_samples(nodes, beams)
            except ValueError as exc:
                raise HTTPException(422, str(exc))
        return samples(dep_id)

    @app.delete("/deployments/{dep_id}", status_code=204)
    def delete(dep_id: str):
        get(dep_id)
        del deployments[dep_id]

    return app


app = create_app()
