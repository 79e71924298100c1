"""Request/response models for the session service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class SpaceInfo(BaseModel):
    n: int
    c: float
    max_norm: float


class ModelInfo(BaseModel):
    name: str
    family: str
    state_dim: int
    action_dim: int
    strict_odd: Optional[bool] = None
    nu: float
    has_estimates: bool = False


class HealthResponse(BaseModel):
    status: str
    models: list[str]
    version: str


class BoundsResponse(BaseModel):
    model: str
    T: int
    nu: float
    M: float
    L: float
    E: float
    tight: float
    exponential: float
    corollary: Optional[float] = None


class SessionCreateRequest(BaseModel):
    model: str
    x0: Optional[list[float]] = None
    nu: Optional[float] = Field(default=None, gt=0)


class ArmInfo(BaseModel):
    link_lengths: list[float]
    joint_lo: list[float]
    joint_hi: list[float]


class SessionInfo(BaseModel):
    session_id: str
    model: str
    nu: float
    space: SpaceInfo
    arm: ArmInfo
    x0: list[float]


class StepRequest(BaseModel):
    a: list[float]


class StateFrame(BaseModel):
    type: str = "state"
    x: list[float]
    ee: list[float]
    links: list[list[float]]
    dist_origin: float
    step: int


class LogResponse(BaseModel):
    session_id: str
    model: str
    nu: float
    x0: list[float]
    entries: list[dict]
