"""Reverse-mode differentiation core.

A ``GradTape`` records the primitive operations of one forward evaluation;
``backward`` replays it in reverse and accumulates gradients for every
parameter and input that influenced the output.  Tapes are rebuilt per
forward pass and may be consumed exactly once.

Every op works in two modes: called on plain ndarrays it just computes
(fast inference path), called on ``Var`` handles it also records itself on
the tape.  All numerics are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError, UsageError

Array = np.ndarray

_SIGMA_SEED = 0x5EED  # deterministic start vector for power iteration


def as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class _Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents, vjp, requires_grad):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad


class Var:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "GradTape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Array:
        return self.tape._nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    def __neg__(self):
        return neg(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


class GradTape:
    """Recorded primitive operations for one forward evaluation.

    ``watch_params=False`` skips gradients for arrays registered through
    :meth:`param`, which speeds up input-only differentiation.
    """

    def __init__(self, watch_params: bool = True):
        self._nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}
        self._consumed = False
        self.watch_params = watch_params

    def leaf(self, value, requires_grad: bool = True) -> Var:
        value = as_f64(value)
        idx = self._leaf_ids.get(id(value))
        if idx is not None:
            return Var(self, idx)
        self._nodes.append(_Node(value, (), None, requires_grad))
        idx = len(self._nodes) - 1
        self._leaf_ids[id(value)] = idx
        return Var(self, idx)

    def param(self, value) -> Var:
        return self.leaf(value, requires_grad=self.watch_params)

    def _record(self, value, parents: tuple[Var, ...], vjp) -> Var:
        requires = any(
            self._nodes[p.index].requires_grad for p in parents
        )
        self._nodes.append(
            _Node(value, tuple(p.index for p in parents), vjp if requires else None, requires)
        )
        return Var(self, len(self._nodes) - 1)


class Grads:
    """Gradient lookup for one completed backward pass."""

    def __init__(self, tape: GradTape, table: list):
        self._tape = tape
        self._table = table

    def wrt(self, var: Var) -> Array:
        g = self._table[var.index]
        if g is None:
            return np.zeros_like(var.value)
        return g

    def wrt_array(self, arr: Array) -> Array:
        idx = self._tape._leaf_ids.get(id(arr))
        if idx is None:
            return np.zeros_like(arr)
        g = self._table[idx]
        return np.zeros_like(arr) if g is None else g


def backward(tape: GradTape, output: Var, seed=None) -> Grads:
    """Replay ``tape`` in reverse from ``output``.

    ``seed`` defaults to ones; the result holds d(seed . output)/d(leaf)
    for every leaf recorded with gradients enabled.  A tape can be
    consumed once.
    """
    if tape._consumed:
        raise UsageError("gradient tape already consumed")
    tape._consumed = True
    nodes = tape._nodes
    out_node = nodes[output.index]
    if seed is None:
        seed = np.ones_like(out_node.value)
    seed = as_f64(seed)
    if seed.shape != out_node.value.shape:
        raise ShapeError(
            f"seed shape {seed.shape} does not match output shape {out_node.value.shape}"
        )
    table: list = [None] * len(nodes)
    table[output.index] = seed
    for idx in range(output.index, -1, -1):
        node = nodes[idx]
        g = table[idx]
        if g is None or node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not nodes[p].requires_grad:
                continue
            if table[p] is None:
                table[p] = pg
            else:
                table[p] = table[p] + pg
    return Grads(tape, table)


# ---------------------------------------------------------------------------
# primitive ops (dual mode: ndarray in -> ndarray out, Var in -> Var out)
# ---------------------------------------------------------------------------


def _is_var(x) -> bool:
    return isinstance(x, Var)


def _value(x) -> Array:
    return x.value if _is_var(x) else as_f64(x)


def _lift(tape: GradTape, x) -> Var:
    return x if _is_var(x) else tape.leaf(as_f64(x), requires_grad=False)


def _tape_of(*args) -> Optional[GradTape]:
    for a in args:
        if _is_var(a):
            return a.tape
    return None


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    tape = _tape_of(a, b)
    va, vb = _value(a), _value(b)
    out = va + vb
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = va.shape, vb.shape
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape_of(a, b)
    va, vb = _value(a), _value(b)
    out = va - vb
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = va.shape, vb.shape
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def neg(a):
    if not _is_var(a):
        return -_value(a)
    return a.tape._record(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    if not _is_var(b) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not _is_var(a) and np.ndim(a) == 0:
        return scale(b, float(a))
    tape = _tape_of(a, b)
    va, vb = _value(a), _value(b)
    out = va * vb
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = va.shape, vb.shape
    return tape._record(
        out, (a, b), lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb))
    )


def scale(a, s: float):
    if not _is_var(a):
        return _value(a) * s
    return a.tape._record(a.value * s, (a,), lambda g: (g * s,))


def _check_einsum_spec(spec: str):
    ins, out = spec.split("->")
    s1, s2 = ins.split(",")
    for this, other in ((s1, s2), (s2, s1)):
        if not set(this) <= set(out) | set(other):
            raise ConfigError(f"einsum spec {spec!r} is not reverse-differentiable")
    return s1, s2, out


def einsum(spec: str, a, b):
    """Binary einsum; each input index must appear in the output or the
    other operand (no lone reductions), which makes the adjoint another
    einsum."""
    s1, s2, so = _check_einsum_spec(spec)
    tape = _tape_of(a, b)
    va, vb = _value(a), _value(b)
    try:
        out = np.einsum(spec, va, vb, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec!r}: {exc}") from exc
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)

    def vjp(g):
        return (
            np.einsum(f"{so},{s2}->{s1}", g, vb, optimize=True),
            np.einsum(f"{so},{s1}->{s2}", g, va, optimize=True),
        )

    return tape._record(out, (a, b), vjp)


def concat(a, b, axis: int = -1):
    tape = _tape_of(a, b)
    va, vb = _value(a), _value(b)
    out = np.concatenate([va, vb], axis=axis)
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)
    split = va.shape[axis]

    def vjp(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return tape._record(out, (a, b), vjp)


def reshape(a, shape):
    if not _is_var(a):
        return _value(a).reshape(shape)
    old = a.value.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_sq(a):
    """Sum of squared entries, as a scalar."""
    if not _is_var(a):
        v = _value(a)
        return float(np.sum(v * v))
    v = a.value
    out = np.asarray(np.sum(v * v))
    return a.tape._record(out, (a,), lambda g: (2.0 * g * v,))


def vsum(a, axis=None):
    if not _is_var(a):
        return np.sum(_value(a), axis=axis)
    v = a.value
    out = np.asarray(np.sum(v, axis=axis))
    shape = v.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

# Registered activations are odd, sigma(-z) = -sigma(z), and fix zero.
_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sin": (np.sin, lambda x, y: np.cos(x)),
    "identity": (lambda x: x, lambda x, y: np.ones_like(x)),
}


def activation_kinds() -> tuple[str, ...]:
    return tuple(_ACTIVATIONS)


def activation(kind: str, a):
    """Apply a registered odd activation elementwise."""
    try:
        fn, dfn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(
            f"unregistered activation {kind!r}; known: {sorted(_ACTIVATIONS)}"
        ) from None
    if not _is_var(a):
        return fn(_value(a))
    x = a.value
    y = fn(x)
    return a.tape._record(y, (a,), lambda g: (g * dfn(x, y),))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _check_finite(name: str, arr: Array):
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains nonfinite entries")


@dataclass
class DenseLayerParams:
    """Affine layer y = W x (+ b).  Bias is omitted where oddness requires."""

    weight: Array
    bias: Optional[Array] = None
    _power_v: Optional[Array] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.weight = as_f64(self.weight)
        if self.weight.ndim != 2:
            raise ShapeError(f"dense weight must be 2-D, got {self.weight.shape}")
        _check_finite("dense weight", self.weight)
        if self.bias is not None:
            self.bias = as_f64(self.bias)
            if self.bias.shape != (self.weight.shape[0],):
                raise ShapeError(
                    f"bias shape {self.bias.shape} does not match out dim {self.weight.shape[0]}"
                )
            _check_finite("dense bias", self.bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class TensorLayerParams:
    """3-D tensor layer: W(phi)[i, j] = sum_k H[i, k, j] phi[k] + B[i, j].

    The resulting matrix W multiplies the action-path input.  B may be
    present only in configurations that do not require strict oddness.
    """

    H: Array
    B: Optional[Array] = None
    _power_v: Optional[Array] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.H = as_f64(self.H)
        if self.H.ndim != 3:
            raise ShapeError(f"tensor weight must be 3-D, got {self.H.shape}")
        _check_finite("tensor weight", self.H)
        if self.B is not None:
            self.B = as_f64(self.B)
            h, w, n = self.H.shape
            if self.B.shape != (h, n):
                raise ShapeError(
                    f"matrix bias shape {self.B.shape} does not match ({h}, {n})"
                )
            _check_finite("tensor bias", self.B)

    @property
    def feat_dim(self) -> int:
        return self.H.shape[1]

    @property
    def in_dim(self) -> int:
        return self.H.shape[2]

    @property
    def out_dim(self) -> int:
        return self.H.shape[0]


def dense_forward(layer: DenseLayerParams, x, tape: Optional[GradTape] = None):
    """W x (+ b) for a single vector or a batch with leading batch axis."""
    v = _value(x)
    if v.shape[-1] != layer.in_dim:
        raise ShapeError(
            f"dense input dim {v.shape[-1]} does not match weight in-dim {layer.in_dim}"
        )
    if v.ndim > 2:
        raise ShapeError(f"dense input must be 1-D or 2-D, got {v.shape}")
    if tape is not None:
        w = tape.param(layer.weight)
        xv = x if _is_var(x) else tape.leaf(v, requires_grad=False)
        spec = "oi,i->o" if v.ndim == 1 else "oi,bi->bo"
        y = einsum(spec, w, xv)
        if layer.bias is not None:
            y = add(y, tape.param(layer.bias))
        return y
    y = np.einsum("oi,i->o" if v.ndim == 1 else "oi,bi->bo", layer.weight, v)
    if layer.bias is not None:
        y = y + layer.bias
    return y


def tensor_contract(layer: TensorLayerParams, phi, tape: Optional[GradTape] = None):
    """Contract the 3-D tensor with state features phi; returns the local
    action matrix W (h x n), batched when phi is batched."""
    v = _value(phi)
    if v.shape[-1] != layer.feat_dim:
        raise ShapeError(
            f"feature dim {v.shape[-1]} does not match tensor feat-dim {layer.feat_dim}"
        )
    if v.ndim > 2:
        raise ShapeError(f"features must be 1-D or 2-D, got {v.shape}")
    spec = "ikj,k->ij" if v.ndim == 1 else "ikj,bk->bij"
    if tape is not None:
        h = tape.param(layer.H)
        pv = phi if _is_var(phi) else tape.leaf(v, requires_grad=False)
        w = einsum(spec, h, pv)
        if layer.B is not None:
            w = add(w, tape.param(layer.B))
        return w
    w = np.einsum(spec, layer.H, v, optimize=True)
    if layer.B is not None:
        w = w + layer.B
    return w


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second-moment accumulators plus step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Array], grads: dict[str, Array], state: AdamState):
    """One bias-corrected Adam update, in place.  Returns (params, state)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"nonfinite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# spectral norm by power iteration
# ---------------------------------------------------------------------------


def _power_start(n: int) -> Array:
    v = np.random.default_rng(_SIGMA_SEED).standard_normal(n)
    return v / np.linalg.norm(v)


def power_iteration(
    mat: Array,
    v0: Optional[Array] = None,
    tol: float = 1e-8,
    min_iters: int = 0,
    max_iters: int = 10000,
) -> tuple[float, Array]:
    """Largest singular value of ``mat`` plus the right singular vector.

    Iterates v <- normalize(M^T M v); a zero matrix yields (0, v0).
    """
    mat = as_f64(mat)
    if mat.ndim != 2:
        raise ShapeError(f"spectral norm needs a 2-D matrix, got {mat.shape}")
    n = mat.shape[1]
    if v0 is None or v0.shape != (n,) or not np.all(np.isfinite(v0)):
        v = _power_start(n)
    else:
        v = v0 / np.linalg.norm(v0)
    if not np.any(mat):
        return 0.0, v
    sigma = 0.0
    for it in range(max_iters):
        w = mat.T @ (mat @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # v landed in the null space; restart once from a shifted vector
            v = _power_start(n)[::-1].copy()
            w = mat.T @ (mat @ v)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                return 0.0, v
        v = w / nw
        new_sigma = np.linalg.norm(mat @ v)
        if it + 1 >= min_iters and abs(new_sigma - sigma) <= tol * max(new_sigma, 1e-300):
            return float(new_sigma), v
        sigma = new_sigma
    return float(sigma), v


def spectral_norm(mat: Array, p: int = 2, tol: float = 1e-8) -> float:
    """Largest singular value (operator 2-norm) via power iteration."""
    if p != 2:
        raise ConfigError(f"only p=2 is supported, got p={p}")
    sigma, _ = power_iteration(mat, tol=tol)
    return sigma


def layer_spectral_norm(
    layer, mat: Array, tol: float = 1e-13, min_iters: int = 5, max_iters: int = 2000
) -> float:
    """Spectral norm with the warm-start vector persisted on ``layer``.

    The tight tolerance keeps the weight projection idempotent: a looser
    estimate would let a second projection pass rescale by ~1+tol.
    """
    sigma, v = power_iteration(
        mat, v0=layer._power_v, tol=tol, min_iters=min_iters, max_iters=max_iters
    )
    layer._power_v = v
    return sigma
