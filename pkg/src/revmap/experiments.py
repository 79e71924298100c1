"""Experiment drivers shared by the CLI and the acceptance suite.

Each driver takes explicit configuration and returns plain data; file
writing lives in the CLI wrappers so the functions stay reusable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import arm as arm_mod
from . import maps, training
from .datasets import Dataset
from .errors import InputError
from .maps import ActionSpace, CaeModel
from .reversibility import (
    BoundEstimates,
    BoundReport,
    EstimationBudget,
    StateBox,
    estimate_bounds,
    reversibility_experiment,
)


def dataset_region(ds: Dataset, arm: Optional[arm_mod.ArmModel], margin: float = 0.35) -> StateBox:
    """Estimation region: the dataset bounding box inflated by ``margin``
    (absolute radians), intersected with the joint limits.

    The margin covers the drift of the certification rollouts, which start
    at data states and move at most T * nu * M away.
    """
    lo, hi = ds.state_box(margin)
    if arm is not None:
        lo = np.maximum(lo, arm.joint_lo)
        hi = np.minimum(hi, arm.joint_hi)
    return StateBox(lo, hi)


def arm_from_dataset(ds: Dataset) -> arm_mod.ArmModel:
    if "arm" in ds.header:
        return arm_mod.ArmModel.from_dict(ds.header["arm"])
    return arm_mod.default_arm(dof=ds.state_dim)


def latent_scale(model: CaeModel, ds: Dataset, percentile: float = 95.0) -> float:
    """Deployment action scale: a high percentile of encoder outputs."""
    a = maps.encode(model.encoder, ds.states, ds.velocities)
    return float(np.percentile(np.abs(a), percentile))


def recon_eval(model: CaeModel, test: Dataset) -> dict:
    mse = training.evaluate_mse(model, test)
    return {
        "test_mse": mse,
        "log10_test_mse": math.log10(mse) if mse > 0 else -math.inf,
        "samples": len(test),
    }


def linearization_sweep(
    model: CaeModel,
    test: Dataset,
    magnitudes: Sequence[float],
    max_states: int = 40,
    n_directions: int = 64,
    seed: int = 0,
) -> list[maps.LinearizationRecord]:
    states = test.states[:max_states]
    return maps.linearization_gap(
        model.decoder, states, magnitudes, n_directions=n_directions, seed=seed
    )


def estimate_for_model(
    model: CaeModel,
    ds: Dataset,
    budget: EstimationBudget = EstimationBudget(),
    margin: float = 0.35,
    deploy_scl: bool = False,
) -> BoundEstimates:
    arm = arm_from_dataset(ds)
    region = dataset_region(ds, arm, margin)
    decoder = maps.DeployedHyperLinear(model.decoder) if deploy_scl and model.family == "scl" else model.decoder
    return estimate_bounds(decoder, region, model.space, budget)


def certification_run(
    model: CaeModel,
    ds: Dataset,
    estimates: BoundEstimates,
    durations: Sequence[int] = (10, 100, 1000),
    nu: float = 1e-3,
    trials: int = 20,
    seed: int = 0,
    start_count: int = 64,
) -> list[BoundReport]:
    starts = ds.states[:: max(1, len(ds) // start_count)][:start_count]
    return reversibility_experiment(
        model.decoder,
        estimates,
        starts,
        durations=durations,
        nu=nu,
        trials=trials,
        seed=seed,
        action_dim=model.space.n,
    )


# ---------------------------------------------------------------------------
# simulated teleoperation benchmark
# ---------------------------------------------------------------------------


@dataclass
class TeleopBenchConfig:
    tasks: int = 10
    nu: float = 1.0
    K: int = 256
    budget: int = 6000
    via_spacing: float = 0.05
    switch_radius: float = 0.12
    action_scale: Optional[float] = None  # default: calibrated from the encoder
    seed: int = 0
    fresh_demos: bool = False  # True: new random targets instead of dataset paths


@dataclass
class TeleopBenchResult:
    task_index: int
    initial_distance: float
    final_distance: float
    fraction: float
    steps: int
    reached: bool
    states: np.ndarray = field(repr=False, default=None)
    actions: np.ndarray = field(repr=False, default=None)


def dataset_demo_paths(ds: Dataset, count: Optional[int] = None) -> list[np.ndarray]:
    """Rebuild the per-trajectory preprocessed state paths recorded in the
    dataset header (same seeds, same pipeline)."""
    header = ds.header
    needed = {"arm", "seed", "trajectories", "steps_per_trajectory", "stride", "gamma"}
    if not needed <= set(header):
        raise InputError("dataset header lacks the trajectory metadata for task replay")
    arm = arm_mod.ArmModel.from_dict(header["arm"])
    cfg = arm_mod.PreprocessConfig(header["gamma"], header["stride"])
    n = count or int(header["trajectories"])
    root = np.random.SeedSequence(int(header["seed"]))
    start_ee, _ = arm_mod.forward_kinematics(arm, arm_mod.home_pose(arm))
    paths = []
    for child in root.spawn(int(header["trajectories"]))[:n]:
        rng = np.random.default_rng(child)
        demo = None
        for _ in range(10):
            target = arm_mod.sample_feasible_target(arm, rng, start_ee)
            try:
                demo = arm_mod.generate_demo(
                    arm, target, steps=int(header["steps_per_trajectory"]),
                    seed=int(child.generate_state(1)[0]),
                )
                break
            except arm_mod.DegeneracyError:
                continue
        if demo is None:
            raise InputError("could not rebuild a dataset trajectory")
        states, _ = arm_mod.preprocess(demo, cfg)
        paths.append(states)
    return paths


def fresh_demo_paths(ds: Dataset, count: int, seed: int) -> list[np.ndarray]:
    arm = arm_from_dataset(ds)
    cfg = arm_mod.PreprocessConfig(ds.header.get("gamma", 0.2), ds.header.get("stride", 3))
    steps = int(ds.header.get("steps_per_trajectory", 1000))
    start_ee, _ = arm_mod.forward_kinematics(arm, arm_mod.home_pose(arm))
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        target = arm_mod.sample_feasible_target(arm, rng, start_ee)
        demo = arm_mod.generate_demo(arm, target, steps=steps, seed=seed * 1000 + i)
        states, _ = arm_mod.preprocess(demo, cfg)
        paths.append(states)
    return paths


def teleop_benchmark(
    model: CaeModel,
    ds: Dataset,
    cfg: TeleopBenchConfig = TeleopBenchConfig(),
) -> list[TeleopBenchResult]:
    """Greedy via-point reaching over ``cfg.tasks`` demonstration paths."""
    arm = arm_from_dataset(ds)
    if cfg.fresh_demos:
        paths = fresh_demo_paths(ds, cfg.tasks, cfg.seed + 1)
    else:
        paths = dataset_demo_paths(ds, cfg.tasks)
    scale = cfg.action_scale if cfg.action_scale is not None else 4.0 * latent_scale(model, ds)
    space = ActionSpace(n=model.space.n, c=scale, max_norm=scale * math.sqrt(2.0))
    decoder = maps.DeployedHyperLinear(model.decoder) if model.family == "scl" else model.decoder
    results = []
    for i, path in enumerate(paths):
        task = arm_mod.make_task_from_states(
            path,
            nu=cfg.nu,
            K=cfg.K,
            budget=cfg.budget,
            via_spacing=cfg.via_spacing,
            switch_radius=cfg.switch_radius,
        )
        res = arm_mod.sim_teleop(decoder, task, seed=cfg.seed + i, space=space, arm=arm)
        results.append(
            TeleopBenchResult(
                task_index=i,
                initial_distance=res.initial_distance,
                final_distance=res.final_distance,
                fraction=res.final_distance / max(res.initial_distance, 1e-300),
                steps=res.trajectory.actions.shape[0],
                reached=res.reached,
                states=res.trajectory.states,
                actions=res.trajectory.actions,
            )
        )
    return results
