"""Request and response models of the HTTP service."""
from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field


class GridModel(BaseModel):
    dims: tuple[int, int, int]
    spacing: float = Field(gt=0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)


class BaseStationModel(BaseModel):
    position: tuple[float, float, float]
    orientation: float = 0.0


class BoxModel(BaseModel):
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    loss_db: float = 10.0


class EnvironmentModel(BaseModel):
    grid: GridModel
    base_stations: list[BaseStationModel] = Field(min_length=1)
    n_sec_bs: int = Field(ge=1)
    n_sec_ue: int = Field(ge=1)
    obstacles: list[BoxModel] = []
    params: dict = {}
    seed: int = 0


class SweepResponse(BaseModel):
    n_nodes: int
    beam_id: list[int]
    bs_id: list[int]
    power_dbm: list[float]


class ParamsModel(BaseModel):
    """A CRF parameter set, either inline or as checkpoint text."""

    checkpoint: str | None = None
    w: list[float] | None = None
    m: list[float] | None = None
    tied: bool = True


class SampleModel(BaseModel):
    node_index: int = Field(ge=0)
    bs_id: int = Field(ge=0)
    sec_bs_id: int = Field(ge=0)
    sec_ue_id: int = Field(ge=0)


class MapEntryModel(BaseModel):
    rank: int
    bs_id: int
    sec_bs_id: int
    sec_ue_id: int
    probability: float


class NodeMapModel(BaseModel):
    node_index: int
    entries: list[MapEntryModel]


class InferRequest(BaseModel):
    grid: GridModel
    n_bs: int = Field(ge=1)
    n_sec_bs: int = Field(ge=1)
    n_sec_ue: int = Field(ge=1)
    max_rank: int = Field(default=8, ge=1)
    theta_bs: ParamsModel | None = None
    theta_sec: ParamsModel | None = None
    samples: list[SampleModel] = Field(min_length=1)
    nodes: list[int] | None = None
    top: int | None = Field(default=10, ge=1)
    engine: Literal["lbp", "exact"] = "lbp"


class InferResponse(BaseModel):
    maps: list[NodeMapModel]


class ConstantsModel(BaseModel):
    xi_bs: int = 1
    xi_ue: int = 1
    p_th: float = 1e-6
    beta: float = 5.0
    beta_unit: Literal["cells", "meters"] = "cells"
    t_frame_ms: float = 1.0
    t_beacon_ms: float = 100.0
    t_brp_ms: float = 2.0
    t_loc_ms: float = 10.0
    t_control_ms: float = 1.0


class DeploymentCreate(BaseModel):
    environment: EnvironmentModel
    theta_bs: ParamsModel | None = None
    theta_sec: ParamsModel | None = None
    samples: list[SampleModel] | None = None
    sample_fraction: float = Field(default=0.01, gt=0, le=1)
    seed: int = 0
    max_rank: int = Field(default=8, ge=1)
    constants: ConstantsModel = ConstantsModel()


class DeploymentInfo(BaseModel):
    deployment_id: str
    n_nodes: int
    n_samples: int
    n_beams: int


class AlignRequest(BaseModel):
    true_location: tuple[float, float, float]
    reported_location: tuple[float, float, float] | None = None


class AlignResponse(BaseModel):
    session_id: int
    node_index: int
    bs_id: int
    sec_bs_id: int
    sec_ue_id: int
    n_trials: int
    used_sls: bool
    elapsed_ms: float
    samples_updated: bool


class SamplesResponse(BaseModel):
    samples: list[SampleModel]


class HealthResponse(BaseModel):
    status: str
    version: str
