"""Planar N-DOF arm: kinematics, synthetic demonstrations, preprocessing,
and greedy simulated teleoperation.

Demonstrations drive the end-effector along a straight line to a sampled
target with damped-least-squares inverse kinematics, standing in for the
kinesthetic recordings the original data came from.  Preprocessing applies
an exponential moving average to the joint sequence, keeps every
``stride``-th sample, and uses the raw finite differences between kept
samples as the velocity targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Array, as_f64
from .datasets import Dataset
from .errors import ConfigError, DegeneracyError, InputError
from .maps import ActionSpace, clamp_action
from .reversibility import EulerConfig, Trajectory, euler_step


@dataclass(frozen=True)
class ArmModel:
    """Planar kinematic chain: link lengths in meters, joint limits in
    radians."""

    link_lengths: tuple
    joint_lo: Array
    joint_hi: Array

    def __post_init__(self):
        object.__setattr__(self, "link_lengths", tuple(float(l) for l in self.link_lengths))
        object.__setattr__(self, "joint_lo", as_f64(self.joint_lo))
        object.__setattr__(self, "joint_hi", as_f64(self.joint_hi))
        if any(l <= 0 for l in self.link_lengths):
            raise ConfigError("link lengths must be positive")
        if self.dof < 2:
            raise ConfigError("need at least 2 joints")
        if (
            self.joint_lo.shape != (self.dof,)
            or self.joint_hi.shape != (self.dof,)
            or np.any(self.joint_lo >= self.joint_hi)
        ):
            raise ConfigError("joint limits must be well-ordered per joint")

    @property
    def dof(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    def clamp(self, joints: Array) -> Array:
        return np.clip(joints, self.joint_lo, self.joint_hi)

    def to_dict(self) -> dict:
        return {
            "link_lengths": list(self.link_lengths),
            "joint_lo": [float(v) for v in self.joint_lo],
            "joint_hi": [float(v) for v in self.joint_hi],
        }

    @staticmethod
    def from_dict(d: dict) -> "ArmModel":
        return ArmModel(tuple(d["link_lengths"]), d["joint_lo"], d["joint_hi"])


def default_arm(dof: int = 5, link_length: float = 0.4, limit: float = math.pi) -> ArmModel:
    return ArmModel(
        (link_length,) * dof, -limit * np.ones(dof), limit * np.ones(dof)
    )


def forward_kinematics(arm: ArmModel, joints) -> tuple[Array, Array]:
    """End-effector position and all link endpoints (base included)."""
    joints = as_f64(joints)
    if joints.shape != (arm.dof,):
        raise InputError(f"expected {arm.dof} joint values, got {joints.shape}")
    angles = np.cumsum(joints)
    points = np.zeros((arm.dof + 1, 2))
    for i, length in enumerate(arm.link_lengths):
        points[i + 1, 0] = points[i, 0] + length * math.cos(angles[i])
        points[i + 1, 1] = points[i, 1] + length * math.sin(angles[i])
    return points[-1], points


def planar_jacobian(arm: ArmModel, joints) -> Array:
    """2 x dof Jacobian of the end-effector position."""
    joints = as_f64(joints)
    angles = np.cumsum(joints)
    jac = np.zeros((2, arm.dof))
    # d(ee)/d(theta_j) accumulates the links at and beyond joint j
    for j in range(arm.dof):
        sx = sy = 0.0
        for i in range(j, arm.dof):
            sx -= arm.link_lengths[i] * math.sin(angles[i])
            sy += arm.link_lengths[i] * math.cos(angles[i])
        jac[0, j] = sx
        jac[1, j] = sy
    return jac


# ---------------------------------------------------------------------------
# synthetic demonstrations
# ---------------------------------------------------------------------------


@dataclass
class Demonstration:
    """Raw joint trajectory plus the metadata that produced it."""

    states: Array
    target: tuple[float, float]
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.states.shape[0]


# moderately bent pose: keeps the chain well away from the outstretched
# singularity so DLS steps stay effective
DEFAULT_HOME = (0.6, 0.9, 0.9, -0.8, -0.8)


def home_pose(arm: ArmModel) -> Array:
    base = np.resize(np.asarray(DEFAULT_HOME), arm.dof)
    return arm.clamp(base)


def sample_target(arm: ArmModel, rng: np.random.Generator,
                  inner: float = 0.3, outer: float = 0.8) -> tuple[float, float]:
    """Uniform target in an annulus between ``inner`` and ``outer`` of reach."""
    radius = arm.reach * math.sqrt(rng.uniform(inner**2, outer**2))
    angle = rng.uniform(-math.pi, math.pi)
    return radius * math.cos(angle), radius * math.sin(angle)


def _segment_origin_distance(p0: Array, p1: Array) -> float:
    seg = p1 - p0
    denom = float(seg @ seg)
    if denom == 0.0:
        return float(np.linalg.norm(p0))
    t = np.clip(-(p0 @ seg) / denom, 0.0, 1.0)
    return float(np.linalg.norm(p0 + t * seg))


def sample_feasible_target(
    arm: ArmModel,
    rng: np.random.Generator,
    start_ee: Array,
    inner: float = 0.3,
    outer: float = 0.8,
    clearance_frac: float = 0.25,
    attempts: int = 200,
) -> tuple[float, float]:
    """Annulus target whose straight line from ``start_ee`` clears the
    fold-limited disk around the base."""
    clearance = clearance_frac * arm.reach
    for _ in range(attempts):
        target = sample_target(arm, rng, inner, outer)
        if _segment_origin_distance(start_ee, as_f64(target)) >= clearance:
            return target
    raise DegeneracyError("could not sample a feasible straight-line target")


def generate_demo(
    arm: ArmModel,
    target: tuple[float, float],
    steps: int = 1000,
    seed: int = 0,
    start: Optional[Array] = None,
    damping: float = 0.05,
    margin: float = 0.01,
    stall_window: int = 50,
    stall_tol: float = 1e-8,
) -> Demonstration:
    """Straight-line end-effector reach recorded as a joint trajectory.

    Damped-least-squares steps track linearly interpolated waypoints from
    the start pose to ``target``; joints are clamped to their limits.
    """
    target_arr = as_f64(target)
    if np.linalg.norm(target_arr) > arm.reach - margin:
        raise InputError(f"target {target} is outside the arm's reach")
    rng = np.random.default_rng(seed)
    if start is None:
        q = arm.clamp(home_pose(arm) + rng.uniform(-0.1, 0.1, arm.dof))
    else:
        q = arm.clamp(as_f64(start).copy())
    ee0, _ = forward_kinematics(arm, q)
    states = np.zeros((steps, arm.dof))
    states[0] = q
    recent_progress = []
    prev_dist = float(np.linalg.norm(target_arr - ee0))
    for k in range(1, steps):
        waypoint = ee0 + (target_arr - ee0) * (k / (steps - 1))
        ee, _ = forward_kinematics(arm, q)
        err = waypoint - ee
        jac = planar_jacobian(arm, q)
        gram = jac @ jac.T + (damping**2) * np.eye(2)
        dq = jac.T @ np.linalg.solve(gram, err)
        q = arm.clamp(q + dq)
        states[k] = q
        ee, _ = forward_kinematics(arm, q)
        dist = float(np.linalg.norm(target_arr - ee))
        recent_progress.append(prev_dist - dist)
        prev_dist = dist
        if len(recent_progress) >= stall_window:
            window = recent_progress[-stall_window:]
            if all(abs(p) < stall_tol for p in window) and dist > 10 * stall_tol:
                raise DegeneracyError(f"IK stalled at step {k}, {dist:.4f} m from target")
    return Demonstration(states, (float(target_arr[0]), float(target_arr[1])), seed)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    """EMA weight on the new sample and the subsampling stride."""

    gamma: float = 0.2
    stride: int = 3

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must be in (0, 1)")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


def ema_filter(states: Array, gamma: float) -> Array:
    """y_t = gamma x_t + (1 - gamma) y_{t-1}, seeded with y_0 = x_0."""
    states = as_f64(states)
    out = np.empty_like(states)
    out[0] = states[0]
    for t in range(1, states.shape[0]):
        out[t] = gamma * states[t] + (1.0 - gamma) * out[t - 1]
    return out


def preprocess(demo: Demonstration, cfg: PreprocessConfig = PreprocessConfig()):
    """Filter, subsample, and pair each kept state with the raw finite
    difference to the next kept state."""
    if len(demo) <= cfg.stride:
        raise InputError(f"demo with {len(demo)} samples is shorter than stride {cfg.stride}")
    filtered = ema_filter(demo.states, cfg.gamma)
    kept = filtered[:: cfg.stride]
    states = kept[:-1]
    velocities = np.diff(kept, axis=0)
    return states, velocities


def generate_dataset(
    arm: ArmModel,
    count: int = 10,
    steps: int = 1000,
    seed: int = 0,
    cfg: PreprocessConfig = PreprocessConfig(),
) -> Dataset:
    """``count`` demonstrations preprocessed into one (state, velocity) set."""
    if count <= 0:
        raise InputError("demonstration count must be positive")
    root = np.random.SeedSequence(seed)
    start_ee, _ = forward_kinematics(arm, home_pose(arm))
    all_states, all_vels = [], []
    for i, child in enumerate(root.spawn(count)):
        rng = np.random.default_rng(child)
        demo = None
        for _ in range(10):
            target = sample_feasible_target(arm, rng, start_ee)
            try:
                demo = generate_demo(
                    arm, target, steps=steps, seed=int(child.generate_state(1)[0])
                )
                break
            except DegeneracyError:
                continue
        if demo is None:
            raise DegeneracyError(f"trajectory {i}: no feasible demonstration found")
        s, v = preprocess(demo, cfg)
        all_states.append(s)
        all_vels.append(v)
    header = {
        "action_source": "finite_difference",
        "stride": cfg.stride,
        "gamma": cfg.gamma,
        "arm": arm.to_dict(),
        "seed": seed,
        "trajectories": count,
        "steps_per_trajectory": steps,
    }
    return Dataset(np.concatenate(all_states), np.concatenate(all_vels), header)


# ---------------------------------------------------------------------------
# greedy simulated teleoperation
# ---------------------------------------------------------------------------


def greedy_action(
    decoder,
    x: Array,
    x_target: Array,
    nu: float,
    K: int,
    rng: np.random.Generator,
    space: ActionSpace,
    clamp: bool = True,
) -> Array:
    """Best of K standard-normal action draws under the one-step objective
    ||x_target - x - nu f(x, a)||^2; first index wins ties."""
    if K < 1:
        raise InputError("K must be >= 1")
    draws = rng.standard_normal((K, space.n))
    if clamp:
        draws = clamp_action(space, draws)
    preds = decoder.velocity(as_f64(x), draws)
    residue = as_f64(x_target) - as_f64(x) - nu * preds
    costs = np.sum(residue * residue, axis=1)
    return draws[int(np.argmin(costs))]


@dataclass
class TeleopTask:
    """Reach ``target`` from ``start`` through ordered via-points."""

    start: Array
    target: Array
    via_points: list
    nu: float = 1.0
    K: int = 256
    budget: int = 2000
    switch_radius: float = 0.05

    def __post_init__(self):
        self.start = as_f64(self.start)
        self.target = as_f64(self.target)
        self.via_points = [as_f64(v) for v in self.via_points]
        if self.budget <= 0:
            raise InputError("step budget must be positive")


def make_task_from_states(
    path_states: Array,
    nu: float = 1.0,
    K: int = 256,
    budget: int = 2000,
    via_spacing: float = 0.5,
    switch_radius: float = 0.05,
) -> TeleopTask:
    """Task along a recorded state path: via-points are placed every
    ``via_spacing`` of accumulated joint-space distance."""
    path_states = as_f64(path_states)
    if path_states.shape[0] < 2:
        raise InputError("need at least two states to build a task")
    vias = []
    acc = 0.0
    for prev, cur in zip(path_states[:-1], path_states[1:]):
        acc += float(np.linalg.norm(cur - prev))
        if acc >= via_spacing:
            vias.append(cur.copy())
            acc = 0.0
    target = path_states[-1]
    if vias and np.linalg.norm(vias[-1] - target) < switch_radius:
        vias.pop()
    return TeleopTask(
        path_states[0].copy(), target.copy(), vias, nu=nu, K=K,
        budget=budget, switch_radius=switch_radius,
    )


@dataclass
class TeleopResult:
    trajectory: Trajectory
    via_distances: list[float]
    final_distance: float
    initial_distance: float
    step_distances: list[float]
    reached: bool


def sim_teleop(
    decoder,
    task: TeleopTask,
    seed: int = 0,
    space: Optional[ActionSpace] = None,
    arm: Optional[ArmModel] = None,
    clamp_draws: bool = True,
) -> TeleopResult:
    """Greedy control toward the active via-point, advancing within the
    switch radius; stops at the budget or once the target is reached."""
    space = space or ActionSpace()
    rng = np.random.default_rng(seed)
    x = task.start.copy()
    states = [x.copy()]
    actions = []
    goals = list(task.via_points) + [task.target]
    pointer = 0
    via_distances: list[float] = []
    step_distances: list[float] = []
    initial = float(np.linalg.norm(task.target - x))
    reached = False
    for _ in range(task.budget):
        while pointer < len(goals) - 1 and np.linalg.norm(goals[pointer] - x) <= task.switch_radius:
            via_distances.append(float(np.linalg.norm(goals[pointer] - x)))
            pointer += 1
        if pointer == len(goals) - 1 and np.linalg.norm(task.target - x) <= task.switch_radius:
            reached = True
            break
        active = goals[pointer]
        a = greedy_action(decoder, x, active, task.nu, task.K, rng, space, clamp_draws)
        x = euler_step(decoder, x, a, task.nu)
        if arm is not None:
            x = arm.clamp(x)
        states.append(x.copy())
        actions.append(a)
        step_distances.append(float(np.linalg.norm(active - x)))
    action_arr = (
        np.array(actions) if actions else np.zeros((0, space.n))
    )
    traj = Trajectory(np.array(states), action_arr, task.nu)
    return TeleopResult(
        trajectory=traj,
        via_distances=via_distances,
        final_distance=float(np.linalg.norm(task.target - x)),
        initial_distance=initial,
        step_distances=step_distances,
        reached=reached,
    )
