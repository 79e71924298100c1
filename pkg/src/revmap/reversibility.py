"""Euler rollouts, mirrored-action replay, and the trajectory
soft-reversibility bounds.

Replaying the negated, reversed action sequence after T forward Euler
steps returns the state to within

    tight:        M nu [(1 + L nu)^T - 1]
    exponential:  nu M [exp(T L nu) - 1]
    residual:     (nu M + E / L) [exp(T L nu) - 1]

where M bounds ||f||, L is a Lipschitz constant of f in the state, and E
bounds the odd-residual ||f(x, -a) + f(x, a)||.  This module evaluates
those closed forms and estimates (M, L, E) empirically by projected
gradient ascent plus random probing, so trained decoders can be
certified against the bounds they are supposed to satisfy.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array, GradTape, as_f64
from .errors import EstimationError, InputError, IntegrationError, ShapeError
from .maps import ActionSpace, batch_state_jacobians, clamp_action


@dataclass(frozen=True)
class EulerConfig:
    nu: float
    T: int

    def __post_init__(self):
        if self.nu <= 0:
            raise InputError(f"step size nu must be positive, got {self.nu}")
        if self.T < 0:
            raise InputError(f"step count T must be >= 0, got {self.T}")


@dataclass
class Trajectory:
    """States and the actions that produced them: len(states) = len(actions)+1."""

    states: Array
    actions: Array
    nu: float

    def __post_init__(self):
        self.states = as_f64(self.states)
        self.actions = as_f64(self.actions)
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise ShapeError(
                f"{self.states.shape[0]} states require {self.states.shape[0] - 1} actions"
            )

    @property
    def times(self) -> Array:
        return self.nu * np.arange(self.states.shape[0])


def euler_step(decoder, x: Array, a: Array, nu: float) -> Array:
    """One explicit Euler step x + nu f(x, a).

    Shared by rollouts and the live session service so that the two paths
    are bit-identical.
    """
    return x + nu * decoder.velocity(x, a)


def rollout(decoder, x0, actions, cfg: EulerConfig) -> Trajectory:
    """Integrate T steps; states are not clamped here."""
    x0 = as_f64(x0)
    actions = as_f64(actions).reshape(len(actions), -1) if len(actions) else np.zeros((0, 1))
    if actions.shape[0] != cfg.T:
        raise InputError(f"got {actions.shape[0]} actions for T={cfg.T}")
    states = np.empty((cfg.T + 1, x0.shape[0]))
    states[0] = x0
    x = x0
    for k in range(cfg.T):
        x = euler_step(decoder, x, actions[k], cfg.nu)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"nonfinite state at step {k}")
        states[k + 1] = x
    return Trajectory(states, actions if cfg.T else np.zeros((0, x0.shape[0])), cfg.nu)


def mirror_actions(actions) -> Array:
    """Reversed-and-negated sequence: out[j] = -actions[T-1-j].

    The step leaving x(T) undoes the step that arrived there, which makes
    a state-independent odd field cancel exactly.
    """
    actions = as_f64(actions)
    return -actions[::-1].copy()


def reversal_error(decoder, x0, actions, cfg: EulerConfig):
    """Roll forward T steps, replay the mirrored actions for T more, and
    return (||x(0) - x(2T)||, the full 2T-step trajectory)."""
    actions = as_f64(actions)
    full = np.concatenate([actions, mirror_actions(actions)], axis=0) if cfg.T else actions
    traj = rollout(decoder, x0, full, EulerConfig(cfg.nu, 2 * cfg.T))
    err = float(np.linalg.norm(traj.states[0] - traj.states[-1]))
    return err, traj


# ---------------------------------------------------------------------------
# closed-form bounds
# ---------------------------------------------------------------------------


def bound_theorem2(nu: float, M: float, L: float, T: int) -> tuple[float, float]:
    """(tight, exponential) trajectory reversibility bounds.

    L = 0 is the degenerate state-independent case; both forms vanish.
    """
    if nu <= 0 or M < 0 or L < 0 or T < 0:
        raise InputError("need nu > 0, M >= 0, L >= 0, T >= 0")
    if T == 0 or L == 0.0:
        return 0.0, 0.0
    with np.errstate(over="ignore"):
        tight = float(M * nu * (np.power(1.0 + L * nu, float(T)) - 1.0))
        exponential = float(nu * M * np.expm1(T * L * nu))
    return tight, exponential


def bound_corollary(nu: float, M: float, L: float, E: float, T: int) -> float:
    """Residual-aware bound (nu M + E/L)(exp(T L nu) - 1); needs L > 0."""
    if L <= 0:
        raise InputError("the residual bound requires L > 0")
    if nu <= 0 or M < 0 or E < 0 or T < 0:
        raise InputError("need nu > 0, M >= 0, E >= 0, T >= 0")
    with np.errstate(over="ignore"):
        return float((nu * M + E / L) * np.expm1(T * L * nu))


# ---------------------------------------------------------------------------
# bound estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateBox:
    """Axis-aligned state region (joint limits or a data bounding box)."""

    lo: Array
    hi: Array

    def __post_init__(self):
        object.__setattr__(self, "lo", as_f64(self.lo))
        object.__setattr__(self, "hi", as_f64(self.hi))
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise InputError("malformed state box")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def clip(self, x: Array) -> Array:
        return np.clip(x, self.lo, self.hi)

    def sample(self, rng: np.random.Generator, count: int) -> Array:
        return rng.uniform(self.lo, self.hi, (count, self.dim))


@dataclass(frozen=True)
class EstimationBudget:
    restarts: int = 32
    steps: int = 200
    step_size: float = 0.01
    probes: int = 4096
    seed: int = 0
    fd_step: float = 1e-5


@dataclass
class BoundEstimates:
    """Empirical maxima with the arguments that achieved them."""

    M: float
    L: float
    E: float
    witness_M: tuple[Array, Array] | None = None
    witness_L: tuple[Array, Array] | None = None
    witness_E: tuple[Array, Array] | None = None

    def to_dict(self) -> dict:
        out = {"M": self.M, "L": self.L, "E": self.E}
        for key, wit in (
            ("witness_M", self.witness_M),
            ("witness_L", self.witness_L),
            ("witness_E", self.witness_E),
        ):
            if wit is not None:
                out[key] = {"x": list(map(float, wit[0])), "a": list(map(float, wit[1]))}
        return out


def _sample_actions(space: ActionSpace, rng: np.random.Generator, count: int) -> Array:
    return clamp_action(space, rng.standard_normal((count, space.n)))


def _ascend(
    value_fn: Callable[[Array, Array], float],
    grad_fn: Callable[[Array, Array], tuple[Array, Array]],
    x0: Array,
    a0: Array,
    box: StateBox,
    space: ActionSpace,
    steps: int,
    step0: float,
):
    """Projected gradient ascent with backtracking on the step length."""
    x, a = box.clip(x0), clamp_action(space, a0)
    best = value_fn(x, a)
    if not math.isfinite(best):
        return None
    eta = step0
    for _ in range(steps):
        gx, ga = grad_fn(x, a)
        norm = math.sqrt(float(np.sum(gx * gx) + np.sum(ga * ga)))
        if not math.isfinite(norm) or norm == 0.0:
            break
        nx = box.clip(x + eta * gx / norm)
        na = clamp_action(space, a + eta * ga / norm)
        cand = value_fn(nx, na)
        if math.isfinite(cand) and cand > best:
            x, a, best = nx, na, cand
            eta = min(eta * 1.5, 0.25)
        else:
            eta *= 0.5
            if eta < 1e-7:
                break
    return best, x, a


def _velocity_grad(decoder, x, a):
    tape = GradTape(watch_params=False)
    xv, av = tape.leaf(x.copy()), tape.leaf(a.copy())
    y = decoder.velocity(xv, av, tape=tape)
    grads = ad.backward(tape, ad.sum_sq(y))
    return grads.wrt(xv), grads.wrt(av)


def _residual_grad(decoder, x, a):
    tape = GradTape(watch_params=False)
    xv, av = tape.leaf(x.copy()), tape.leaf(a.copy())
    y = ad.add(
        decoder.velocity(xv, av, tape=tape),
        decoder.velocity(xv, ad.neg(av), tape=tape),
    )
    grads = ad.backward(tape, ad.sum_sq(y))
    return grads.wrt(xv), grads.wrt(av)


def batched_sigma_max(mats: Array, iters: int = 120, tol: float = 1e-10) -> Array:
    """Largest singular value of each matrix in a (m, r, c) stack."""
    mats = as_f64(mats)
    m, r, c = mats.shape
    v = np.random.default_rng(ad._SIGMA_SEED).standard_normal((m, c))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    sigma = np.zeros(m)
    for _ in range(iters):
        u = np.einsum("mrc,mc->mr", mats, v)
        w = np.einsum("mrc,mr->mc", mats, u)
        nw = np.linalg.norm(w, axis=1, keepdims=True)
        v = np.where(nw > 0, w / np.maximum(nw, 1e-300), v)
        new_sigma = np.linalg.norm(np.einsum("mrc,mc->mr", mats, v), axis=1)
        if np.all(np.abs(new_sigma - sigma) <= tol * np.maximum(new_sigma, 1e-300)):
            sigma = new_sigma
            break
        sigma = new_sigma
    return sigma


def _jacobian_sigma(decoder, x, a, warm: dict) -> float:
    j = batch_state_jacobians(decoder, x[None, :], a[None, :])[0]
    sigma, v = ad.power_iteration(j, v0=warm.get("v"), tol=1e-11, max_iters=400)
    warm["v"] = v
    return sigma


def estimate_bounds(
    decoder,
    region: StateBox,
    space: ActionSpace,
    budget: EstimationBudget = EstimationBudget(),
) -> BoundEstimates:
    """Estimate M = max ||f||, L = max ||df/dx||_2, E = max ||f(x,-a)+f(x,a)||
    over the region by projected gradient ascent with random restarts plus
    a bulk random probe pass.  Estimates are lower bounds of the true maxima.
    """
    rng = np.random.default_rng(budget.seed)
    best = {"M": (-1.0, None), "L": (-1.0, None), "E": (-1.0, None)}

    def consider(key, value, x, a):
        if math.isfinite(value) and value > best[key][0]:
            best[key] = (value, (x.copy(), a.copy()))

    # bulk probes: these already make the estimates dominate random sampling
    if budget.probes > 0:
        X = region.sample(rng, budget.probes)
        A = _sample_actions(space, rng, budget.probes)
        F = decoder.velocity(X, A)
        norms = np.linalg.norm(F, axis=1)
        resid = np.linalg.norm(F + decoder.velocity(X, -A), axis=1)
        sigmas = batched_sigma_max(batch_state_jacobians(decoder, X, A))
        for vals, key in ((norms, "M"), (sigmas, "L"), (resid, "E")):
            finite = np.isfinite(vals)
            if np.any(finite):
                i = int(np.argmax(np.where(finite, vals, -np.inf)))
                consider(key, float(vals[i]), X[i], A[i])

    def m_value(x, a):
        return float(np.linalg.norm(decoder.velocity(x, a)))

    def e_value(x, a):
        return float(np.linalg.norm(decoder.velocity(x, a) + decoder.velocity(x, -a)))

    for _ in range(budget.restarts):
        x0 = region.sample(rng, 1)[0]
        a0 = _sample_actions(space, rng, 1)[0]

        r = _ascend(m_value, lambda x, a: _velocity_grad(decoder, x, a), x0, a0,
                    region, space, budget.steps, budget.step_size)
        if r:
            consider("M", r[0], r[1], r[2])

        r = _ascend(e_value, lambda x, a: _residual_grad(decoder, x, a), x0, a0,
                    region, space, budget.steps, budget.step_size)
        if r:
            consider("E", r[0], r[1], r[2])

        warm: dict = {}
        l_value = lambda x, a: _jacobian_sigma(decoder, x, a, warm)  # noqa: E731

        def l_grad(x, a):
            h = budget.fd_step
            gx = np.zeros_like(x)
            ga = np.zeros_like(a)
            for i in range(x.shape[0]):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                gx[i] = (l_value(xp, a) - l_value(xm, a)) / (2 * h)
            for i in range(a.shape[0]):
                ap, am = a.copy(), a.copy()
                ap[i] += h
                am[i] -= h
                ga[i] = (l_value(x, ap) - l_value(x, am)) / (2 * h)
            return gx, ga

        r = _ascend(l_value, l_grad, x0, a0, region, space, budget.steps, budget.step_size)
        if r:
            consider("L", r[0], r[1], r[2])

    if any(v[0] < 0 for v in best.values()):
        raise EstimationError("no finite evaluation within the estimation budget")
    return BoundEstimates(
        M=best["M"][0],
        L=best["L"][0],
        E=best["E"][0],
        witness_M=best["M"][1],
        witness_L=best["L"][1],
        witness_E=best["E"][1],
    )


# ---------------------------------------------------------------------------
# single-step check and convergence study
# ---------------------------------------------------------------------------


def single_step_check(decoder, x, a, nu: float) -> tuple[float, float, float]:
    """Euler step with a then -a; returns (||x_i - x_{i+2}||,
    ||x_{i+1} - x_i||, their ratio).  Ratio is 0 when the step is zero."""
    x = as_f64(x)
    a = as_f64(a)
    x1 = euler_step(decoder, x, a, nu)
    x2 = euler_step(decoder, x1, -a, nu)
    lhs = float(np.linalg.norm(x - x2))
    rhs = float(np.linalg.norm(x1 - x))
    ratio = lhs / rhs if rhs > 0 else 0.0
    return lhs, rhs, ratio


def piecewise_constant_actions(
    rng: np.random.Generator, n_cells: int, dim: int, unit: bool = True
) -> Array:
    """One action per physical grid cell, unit length by default."""
    a = rng.standard_normal((n_cells, dim))
    if unit:
        a /= np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
    return a


def convergence_study(
    decoder,
    x0,
    horizon: float,
    nus: Sequence[float],
    action_dim: int,
    trials: int = 5,
    seed: int = 0,
    grid_dt: Optional[float] = None,
) -> list[tuple[float, float]]:
    """Mean reversal error at a fixed physical horizon for each step size.

    Actions are piecewise constant on a fixed physical grid so every nu
    integrates the same underlying action signal; T = horizon/nu must be
    integral for each nu.
    """
    x0 = as_f64(x0)
    nus = [float(v) for v in nus]
    grid = float(grid_dt if grid_dt is not None else max(nus))
    n_cells = round(horizon / grid)
    if abs(n_cells * grid - horizon) > 1e-9 * horizon:
        raise InputError(f"horizon {horizon} is not a multiple of the action grid {grid}")
    results = []
    for nu in nus:
        T = round(horizon / nu)
        if abs(T * nu - horizon) > 1e-9 * horizon:
            raise InputError(f"horizon {horizon} is not an integer multiple of nu={nu}")
        per_cell = round(grid / nu)
        if abs(per_cell * nu - grid) > 1e-9 * grid:
            raise InputError(f"action grid {grid} is not an integer multiple of nu={nu}")
        errs = []
        for trial in range(trials):
            rng = np.random.default_rng(np.random.SeedSequence((seed, trial)))
            cells = piecewise_constant_actions(rng, n_cells, action_dim)
            actions = np.repeat(cells, per_cell, axis=0)
            err, _ = reversal_error(decoder, x0, actions, EulerConfig(nu, T))
            errs.append(err)
        results.append((nu, float(np.mean(errs))))
    return results


# ---------------------------------------------------------------------------
# certification experiment
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    """Observed vs predicted reversal error for one duration."""

    nu: float
    T: int
    observed_mean: float
    observed_stderr: float
    observed_max: float
    tight: float
    exponential: float
    corollary: float
    M: float
    L: float
    E: float
    satisfied_tight: bool
    satisfied_exponential: bool
    satisfied_corollary: bool

    @property
    def satisfied(self) -> bool:
        return self.satisfied_tight and self.satisfied_exponential and self.satisfied_corollary

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["satisfied"] = self.satisfied
        return d


CSV_COLUMNS = [
    "T",
    "nu",
    "observed_mean",
    "observed_stderr",
    "tight",
    "exponential",
    "corollary",
    "M",
    "L",
    "E",
    "satisfied",
]


def reversibility_experiment(
    decoder,
    estimates: BoundEstimates,
    start_states: Array,
    durations: Sequence[int] = (10, 100, 1000),
    nu: float = 1e-3,
    trials: int = 20,
    seed: int = 0,
    action_dim: int = 2,
    resample: bool = False,
) -> list[BoundReport]:
    """Replay mirrored unit-norm actions for each duration and compare the
    observed gap against the bounds computed from the estimates.

    By default one random unit action is held for the whole forward leg;
    ``resample=True`` draws a fresh unit action every step instead.
    """
    start_states = np.atleast_2d(as_f64(start_states))
    reports = []
    for T in durations:
        errs = []
        for trial in range(trials):
            rng = np.random.default_rng(np.random.SeedSequence((seed, T, trial)))
            x0 = start_states[rng.integers(len(start_states))]
            if resample:
                actions = piecewise_constant_actions(rng, T, action_dim)
            else:
                actions = np.tile(piecewise_constant_actions(rng, 1, action_dim), (T, 1))
            err, _ = reversal_error(decoder, x0, actions, EulerConfig(nu, T))
            errs.append(err)
        errs_arr = np.array(errs)
        tight, expo = bound_theorem2(nu, estimates.M, estimates.L, T)
        coro = (
            bound_corollary(nu, estimates.M, estimates.L, estimates.E, T)
            if estimates.L > 0
            else float("inf")
        )
        stderr = float(errs_arr.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
        reports.append(
            BoundReport(
                nu=nu,
                T=int(T),
                observed_mean=float(errs_arr.mean()),
                observed_stderr=stderr,
                observed_max=float(errs_arr.max()),
                tight=tight,
                exponential=expo,
                corollary=coro,
                M=estimates.M,
                L=estimates.L,
                E=estimates.E,
                satisfied_tight=bool(np.all(errs_arr <= tight)),
                satisfied_exponential=bool(np.all(errs_arr <= expo)),
                satisfied_corollary=bool(np.all(errs_arr <= coro)),
            )
        )
    return reports


def reports_to_csv(reports: Sequence[BoundReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        d = r.to_dict()
        writer.writerow({k: d[k] for k in CSV_COLUMNS})
    return buf.getvalue()
