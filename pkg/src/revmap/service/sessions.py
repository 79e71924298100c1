"""Session state for the live teleoperation service.

Each session owns its joint state exclusively; the checkpoint store is
shared read-only.  A session processes frames strictly in arrival order
(one lock per session), applies the action clamp, takes exactly one Euler
step per action frame (the same ``euler_step`` the rollout code uses),
clamps to the joint limits, and appends to an append-only log.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..arm import ArmModel, default_arm, forward_kinematics, home_pose
from ..checkpoint import load_checkpoint
from ..errors import InputError, ShapeError
from ..maps import CaeModel, DeployedHyperLinear, clamp_action
from ..reversibility import BoundEstimates, euler_step


@dataclass
class LoadedModel:
    """A checkpoint prepared for serving (SCL wrapped for deployment)."""

    name: str
    model: CaeModel
    arm: ArmModel
    estimates: Optional[BoundEstimates] = None

    @property
    def decoder(self):
        if self.model.family == "scl":
            return DeployedHyperLinear(self.model.decoder)
        return self.model.decoder

    @property
    def start_state(self) -> np.ndarray:
        meta = self.model.meta
        if "start_state" in meta:
            return np.asarray(meta["start_state"], dtype=np.float64)
        return home_pose(self.arm)


def load_for_serving(name: str, path) -> LoadedModel:
    model = load_checkpoint(path)
    if "arm" in model.meta:
        arm = ArmModel.from_dict(model.meta["arm"])
    else:
        arm = default_arm(dof=model.state_dim)
    if arm.dof != model.state_dim:
        raise InputError(
            f"checkpoint {name!r}: arm dof {arm.dof} != model state dim {model.state_dim}"
        )
    estimates = None
    est_path = Path(str(path) + ".estimates.json")
    if est_path.exists():
        doc = json.loads(est_path.read_text())
        estimates = BoundEstimates(M=doc["M"], L=doc["L"], E=doc["E"])
    elif "estimates" in model.meta:
        doc = model.meta["estimates"]
        estimates = BoundEstimates(M=doc["M"], L=doc["L"], E=doc["E"])
    return LoadedModel(name=name, model=model, arm=arm, estimates=estimates)


class Session:
    def __init__(self, session_id: str, loaded: LoadedModel, nu: float,
                 x0: Optional[np.ndarray] = None):
        self.id = session_id
        self.loaded = loaded
        self.nu = float(nu)
        x0 = loaded.start_state if x0 is None else np.asarray(x0, dtype=np.float64)
        if x0.shape != (loaded.model.state_dim,):
            raise ShapeError(
                f"start state has dim {x0.shape}, model expects {loaded.model.state_dim}"
            )
        self.x0 = loaded.arm.clamp(x0).copy()
        self.x = self.x0.copy()
        self.step_count = 0
        self.log: list[dict] = []
        self.lock = threading.Lock()

    def frame(self) -> dict:
        ee, links = forward_kinematics(self.loaded.arm, self.x)
        return {
            "type": "state",
            "x": [float(v) for v in self.x],
            "ee": [float(ee[0]), float(ee[1])],
            "links": [[float(p[0]), float(p[1])] for p in links],
            "dist_origin": float(np.linalg.norm(self.x - self.x0)),
            "step": self.step_count,
        }

    def step(self, a_raw) -> dict:
        a_raw = np.asarray(a_raw, dtype=np.float64)
        space = self.loaded.model.space
        if a_raw.shape != (space.n,):
            raise ShapeError(f"action has shape {a_raw.shape}, expected ({space.n},)")
        if not np.all(np.isfinite(a_raw)):
            raise InputError("action contains nonfinite values")
        a = clamp_action(space, a_raw)
        x_new = euler_step(self.loaded.decoder, self.x, a, self.nu)
        x_new = self.loaded.arm.clamp(x_new)
        self.x = x_new
        self.step_count += 1
        self.log.append({
            "type": "action",
            "a_raw": [float(v) for v in a_raw],
            "a": [float(v) for v in a],
            "x": [float(v) for v in self.x],
        })
        return self.frame()

    def reset(self) -> dict:
        self.x = self.x0.copy()
        self.step_count = 0
        self.log.append({"type": "reset"})
        return self.frame()

    def select_model(self, loaded: LoadedModel) -> None:
        if loaded.model.state_dim != self.loaded.model.state_dim:
            raise InputError(
                f"model {loaded.name!r} has state dim {loaded.model.state_dim}, "
                f"session uses {self.loaded.model.state_dim}"
            )
        self.loaded = loaded
        self.log.append({"type": "select_model", "name": loaded.name})


class SessionManager:
    def __init__(self, models: dict[str, LoadedModel], nu: float = 1e-3):
        if not models:
            raise InputError("the service needs at least one checkpoint")
        self.models = models
        self.default_nu = float(nu)
        self.sessions: dict[str, Session] = {}
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def get_model(self, name: str) -> LoadedModel:
        if name not in self.models:
            raise InputError(f"unknown model {name!r}; loaded: {sorted(self.models)}")
        return self.models[name]

    def create(self, model_name: str, x0=None, nu: Optional[float] = None) -> Session:
        loaded = self.get_model(model_name)
        with self._lock:
            sid = f"s{next(self._counter)}"
            session = Session(sid, loaded, nu or self.default_nu, x0)
            self.sessions[sid] = session
        return session

    def get(self, sid: str) -> Session:
        if sid not in self.sessions:
            raise InputError(f"unknown session {sid!r}")
        return self.sessions[sid]

    def drop(self, sid: str) -> None:
        self.sessions.pop(sid, None)
