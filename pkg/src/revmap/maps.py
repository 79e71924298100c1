"""Encoders and the three decoder families.

The decoder maps a low-dimensional user action ``a`` plus the robot state
``x`` to a joint-velocity command.  Three families are provided:

* ``ae``  — end-to-end MLP on the concatenated (x, a),
* ``scl`` — hyper-linear map: an MLP predicts a local d x n matrix H(x)
            applied linearly to the action (orthonormalized at deployment),
* ``scn`` — a stack of 3-D tensor layers sharing one state-feature net,
            with odd activations and no bias on the action path, which
            makes the map exactly odd in the action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import (
    Array,
    DenseLayerParams,
    GradTape,
    TensorLayerParams,
    as_f64,
)
from .errors import ConfigError, DegeneracyError, InputError, ShapeError


@dataclass(frozen=True)
class ActionSpace:
    """Bounded symmetrical action domain: box [-c, c]^n plus a norm cap."""

    n: int = 2
    c: float = 1.0
    max_norm: float = math.sqrt(2.0)

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"latent dimension must be >= 1, got {self.n}")
        if self.c <= 0 or self.max_norm <= 0:
            raise ConfigError("action bounds must be positive")


def clamp_action(space: ActionSpace, a) -> Array:
    """Componentwise clamp to [-c, c], then clamp the norm to max_norm.

    Idempotent: a second application returns the input bit-for-bit.
    """
    a = as_f64(a)
    if a.shape[-1] != space.n:
        raise ShapeError(f"action dim {a.shape[-1]} != space.n {space.n}")
    out = np.clip(a, -space.c, space.c)
    flat = out.reshape(-1, space.n)
    norms = np.linalg.norm(flat, axis=1)
    for i in np.nonzero(norms > space.max_norm)[0]:
        row = flat[i]
        n = norms[i]
        while n > space.max_norm and n > 0.0:
            row *= space.max_norm / n
            n = np.linalg.norm(row)
    return flat.reshape(a.shape)


# ---------------------------------------------------------------------------
# MLP building block
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Dense layers with the activation applied between layers only."""

    layers: list[DenseLayerParams]
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def mlp_forward(mlp: MlpParams, x, tape: Optional[GradTape] = None):
    h = x
    last = len(mlp.layers) - 1
    for i, layer in enumerate(mlp.layers):
        h = ad.dense_forward(layer, h, tape)
        if i < last:
            h = ad.activation(mlp.activation, h)
    return h


def init_dense(rng: np.random.Generator, out_dim: int, in_dim: int, bias: bool = True):
    """Uniform init in (-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(in_dim)
    w = rng.uniform(-bound, bound, (out_dim, in_dim))
    b = rng.uniform(-bound, bound, out_dim) if bias else None
    return DenseLayerParams(w, b)


def init_mlp(rng, dims: Sequence[int], activation: str = "tanh", bias: bool = True):
    layers = [
        init_dense(rng, dims[i + 1], dims[i], bias=bias) for i in range(len(dims) - 1)
    ]
    return MlpParams(layers, activation)


def init_tensor_layer(rng, out_dim: int, feat_dim: int, in_dim: int, bias: bool):
    # fan-in for a tensor layer counts the full action-product dimension
    bound = 1.0 / math.sqrt(feat_dim * in_dim)
    h = rng.uniform(-bound, bound, (out_dim, feat_dim, in_dim))
    b = rng.uniform(-bound, bound, (out_dim, in_dim)) if bias else None
    return TensorLayerParams(h, b)


def _promote_pair(x: Array, a: Array, state_dim: int, action_dim: int):
    """Broadcast a lone state against a batch of actions (and vice versa)."""
    if x.shape[-1] != state_dim:
        raise ShapeError(f"state dim {x.shape[-1]} != {state_dim}")
    if a.shape[-1] != action_dim:
        raise ShapeError(f"action dim {a.shape[-1]} != {action_dim}")
    if x.ndim == a.ndim:
        return x, a, x.ndim == 1
    if x.ndim == 1 and a.ndim == 2:
        return np.broadcast_to(x, (a.shape[0], state_dim)), a, False
    if x.ndim == 2 and a.ndim == 1:
        return x, np.broadcast_to(a, (x.shape[0], action_dim)), False
    raise ShapeError(f"cannot pair state shape {x.shape} with action shape {a.shape}")


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderParams:
    """g(x, xdot) -> a.  Separate network; shares nothing with decoders."""

    mlp: MlpParams
    state_dim: int
    action_dim: int


def encode(enc: EncoderParams, x, xdot, tape: Optional[GradTape] = None):
    vx, vxd = ad._value(x), ad._value(xdot)
    if vx.shape[-1] != enc.state_dim or vxd.shape[-1] != enc.state_dim:
        raise ShapeError(
            f"encoder expects state dim {enc.state_dim}, got {vx.shape[-1]}/{vxd.shape[-1]}"
        )
    z = ad.concat(x, xdot, axis=-1)
    return mlp_forward(enc.mlp, z, tape)


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------


@dataclass
class AeDecoderParams:
    """End-to-end decoder: MLP on the concatenated (x, a)."""

    mlp: MlpParams
    state_dim: int
    action_dim: int

    def velocity(self, x, a, tape: Optional[GradTape] = None):
        return decode_ae(self, x, a, tape)


def decode_ae(dec: AeDecoderParams, x, a, tape: Optional[GradTape] = None):
    if tape is None:
        x, a, single = _promote_pair(as_f64(x), as_f64(a), dec.state_dim, dec.action_dim)
    z = ad.concat(x, a, axis=-1)
    return mlp_forward(dec.mlp, z, tape)


@dataclass
class HyperLinearParams:
    """Hyper-linear decoder: h(x) emits a d x n matrix applied to a.

    The MLP output of length d*n is reshaped row-major to (d, n); the
    checkpoint schema records the same convention.
    """

    mlp: MlpParams
    state_dim: int
    action_dim: int

    def velocity(self, x, a, tape: Optional[GradTape] = None):
        return decode_hyperlinear(self, x, a, tape=tape)

    def matrix(self, x, tape: Optional[GradTape] = None):
        flat = mlp_forward(self.mlp, x, tape)
        v = ad._value(flat)
        d, n = self.state_dim, self.action_dim
        if v.ndim == 1:
            return ad.reshape(flat, (d, n))
        return ad.reshape(flat, (v.shape[0], d, n))


def orthonormalize_columns(mat: Array, tol: float = 1e-10) -> Array:
    """Modified Gram-Schmidt over columns in fixed order 0..n-1."""
    mat = as_f64(mat)
    q = mat.copy()
    n = q.shape[1]
    for j in range(n):
        v = q[:, j]
        for i in range(j):
            v -= (q[:, i] @ v) * q[:, i]
        r = np.linalg.norm(v)
        if r < tol:
            raise DegeneracyError(
                f"column {j} of the predicted matrix is numerically dependent (residual {r:.3e})"
            )
        q[:, j] = v / r
    return q


def decode_hyperlinear(
    h: HyperLinearParams, x, a, deploy: bool = False, tape: Optional[GradTape] = None
):
    if deploy and tape is not None:
        raise ConfigError("deploy-mode orthonormalization is not differentiable")
    if tape is not None:
        H = h.matrix(x, tape)
        spec = "ij,j->i" if ad._value(a).ndim == 1 else "bij,bj->bi"
        return ad.einsum(spec, H, a)
    x, a = as_f64(x), as_f64(a)
    if x.ndim == 1:
        # one state, one matrix: shared across however many actions
        if x.shape[-1] != h.state_dim or a.shape[-1] != h.action_dim:
            raise ShapeError(f"dims {x.shape}/{a.shape} do not match decoder")
        H = h.matrix(x)
        if deploy:
            H = orthonormalize_columns(H)
        return a @ H.T if a.ndim == 2 else H @ a
    x, a, _ = _promote_pair(x, a, h.state_dim, h.action_dim)
    H = h.matrix(x)
    if deploy:
        H = np.stack([orthonormalize_columns(m) for m in H])
    return np.einsum("bij,bj->bi", H, a)


@dataclass
class DeployedHyperLinear:
    """Deployment view of an SCL decoder: columns orthonormalized per state."""

    base: HyperLinearParams

    @property
    def state_dim(self) -> int:
        return self.base.state_dim

    @property
    def action_dim(self) -> int:
        return self.base.action_dim

    def velocity(self, x, a, tape: Optional[GradTape] = None):
        if tape is not None:
            raise ConfigError("deploy-mode orthonormalization is not differentiable")
        return decode_hyperlinear(self.base, x, a, deploy=True)


@dataclass
class ScnParams:
    """State-conditioned nonlinear map: tensor layers sharing one feature net.

    ``strict_odd`` drops every matrix bias B, making the map exactly odd in
    the action and pinning f(x, 0) = 0.
    """

    phi: MlpParams
    layers: list[TensorLayerParams]
    activation: str = "tanh"
    strict_odd: bool = True
    state_dim: int = 0
    action_dim: int = 0

    def __post_init__(self):
        if self.activation not in ad.activation_kinds():
            raise ConfigError(
                f"activation {self.activation!r} is not a registered odd activation"
            )
        if self.strict_odd and any(layer.B is not None for layer in self.layers):
            raise ConfigError("strict-odd mode forbids matrix bias terms")

    def features(self, x, tape: Optional[GradTape] = None):
        # the feature net output passes through the activation so that the
        # state conditioning is nonlinear even with a single layer
        return ad.activation(self.activation, mlp_forward(self.phi, x, tape))

    def velocity(self, x, a, tape: Optional[GradTape] = None):
        return decode_scn(self, x, a, tape)


def decode_scn(scn: ScnParams, x, a, tape: Optional[GradTape] = None):
    if tape is None:
        x, a, _ = _promote_pair(as_f64(x), as_f64(a), scn.state_dim, scn.action_dim)
    phi = scn.features(x, tape)
    batched = ad._value(phi).ndim == 2
    spec = "bij,bj->bi" if batched else "ij,j->i"
    h = a
    last = len(scn.layers) - 1
    for i, layer in enumerate(scn.layers):
        w = ad.tensor_contract(layer, phi, tape)
        h = ad.einsum(spec, w, h)
        if i < last:
            h = ad.activation(scn.activation, h)
    return h


Decoder = Union[AeDecoderParams, HyperLinearParams, ScnParams, DeployedHyperLinear]


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


@dataclass
class CaeModel:
    """Encoder/decoder pair plus the action space they were trained for."""

    family: str  # "ae" | "scl" | "scn"
    encoder: EncoderParams
    decoder: Decoder
    space: ActionSpace
    meta: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.encoder.state_dim

    def decode(self, x, a, tape: Optional[GradTape] = None):
        return self.decoder.velocity(x, a, tape)

    def named_params(self) -> list[tuple[str, Array]]:
        out: list[tuple[str, Array]] = []
        for i, layer in enumerate(self.encoder.mlp.layers):
            out.append((f"enc.{i}.weight", layer.weight))
            if layer.bias is not None:
                out.append((f"enc.{i}.bias", layer.bias))
        dec = self.decoder
        if isinstance(dec, AeDecoderParams):
            mlps = [("dec", dec.mlp)]
        elif isinstance(dec, HyperLinearParams):
            mlps = [("dec", dec.mlp)]
        elif isinstance(dec, ScnParams):
            mlps = [("phi", dec.phi)]
        else:
            raise ConfigError(f"unsupported decoder type {type(dec).__name__}")
        for prefix, mlp in mlps:
            for i, layer in enumerate(mlp.layers):
                out.append((f"{prefix}.{i}.weight", layer.weight))
                if layer.bias is not None:
                    out.append((f"{prefix}.{i}.bias", layer.bias))
        if isinstance(dec, ScnParams):
            for i, layer in enumerate(dec.layers):
                out.append((f"tensor.{i}.H", layer.H))
                if layer.B is not None:
                    out.append((f"tensor.{i}.B", layer.B))
        return out


MODEL_FAMILIES = ("ae", "scl", "scn")

# layer widths from the reference experiments: 3 layers throughout,
# 256 units for the MLP families, 32 tensor units + 48 feature units for scn
DEFAULT_MLP_WIDTH = 256
DEFAULT_TENSOR_WIDTH = 32
DEFAULT_FEATURE_WIDTH = 48
DEFAULT_DEPTH = 3


def build_model(
    family: str,
    state_dim: int,
    space: ActionSpace = ActionSpace(),
    seed: int = 0,
    hidden: Optional[int] = None,
    depth: int = DEFAULT_DEPTH,
    feature_width: int = DEFAULT_FEATURE_WIDTH,
    activation: str = "tanh",
    strict_odd: bool = True,
) -> CaeModel:
    """Seeded construction of an encoder/decoder pair of the given family."""
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"unknown model family {family!r}; known: {MODEL_FAMILIES}")
    rng = np.random.default_rng(seed)
    d, n = state_dim, space.n
    width = hidden if hidden is not None else DEFAULT_MLP_WIDTH
    enc_dims = [2 * d] + [width] * (depth - 1) + [n]
    encoder = EncoderParams(init_mlp(rng, enc_dims, activation), d, n)
    if family == "ae":
        dec_dims = [d + n] + [width] * (depth - 1) + [d]
        decoder: Decoder = AeDecoderParams(init_mlp(rng, dec_dims, activation), d, n)
    elif family == "scl":
        dec_dims = [d] + [width] * (depth - 1) + [d * n]
        decoder = HyperLinearParams(init_mlp(rng, dec_dims, activation), d, n)
    else:
        t_width = hidden if hidden is not None else DEFAULT_TENSOR_WIDTH
        phi = init_mlp(rng, [d, feature_width], activation)
        dims = [n] + [t_width] * (depth - 1) + [d]
        layers = [
            init_tensor_layer(rng, dims[i + 1], feature_width, dims[i], bias=not strict_odd)
            for i in range(depth)
        ]
        decoder = ScnParams(
            phi, layers, activation, strict_odd, state_dim=d, action_dim=n
        )
    return CaeModel(family, encoder, decoder, space)


# ---------------------------------------------------------------------------
# jacobians and linearization
# ---------------------------------------------------------------------------


def _tiled_jacobian(decoder, x: Array, a: Array, wrt: str) -> Array:
    """Jacobian at a single (x, a) via one taped forward over d copies.

    Each batch row receives a distinct one-hot seed, so a single backward
    pass yields every Jacobian row at once.
    """
    x = as_f64(x)
    a = as_f64(a)
    d_out = decoder.state_dim
    X = np.repeat(x[None, :], d_out, axis=0)
    A = np.repeat(a[None, :], d_out, axis=0)
    tape = GradTape(watch_params=False)
    xv = tape.leaf(X)
    av = tape.leaf(A)
    y = decoder.velocity(xv, av, tape=tape)
    if y.value.shape != (d_out, d_out):
        raise ShapeError(f"unexpected decoder output shape {y.value.shape}")
    grads = ad.backward(tape, y, seed=np.eye(d_out))
    return grads.wrt(xv) if wrt == "state" else grads.wrt(av)


def jacobian_at_zero(decoder, x) -> Array:
    """d f / d a at a = 0 (the local linear map of the Taylor expansion)."""
    a0 = np.zeros(decoder.action_dim)
    return _tiled_jacobian(decoder, x, a0, wrt="action")


def state_jacobian(decoder, x, a) -> Array:
    """d f / d x at (x, a); the operator norm of this drives the bounds."""
    return _tiled_jacobian(decoder, as_f64(x), as_f64(a), wrt="state")


def batch_state_jacobians(decoder, X: Array, A: Array) -> Array:
    """State Jacobians for m probe pairs, shaped (m, d, d)."""
    X, A = as_f64(X), as_f64(A)
    m, d = X.shape
    Xr = np.repeat(X, d, axis=0)
    Ar = np.repeat(A, d, axis=0)
    tape = GradTape(watch_params=False)
    xv = tape.leaf(Xr)
    av = tape.leaf(Ar)
    y = decoder.velocity(xv, av, tape=tape)
    seed = np.tile(np.eye(d), (m, 1))
    grads = ad.backward(tape, y, seed=seed)
    return grads.wrt(xv).reshape(m, d, d)


@dataclass(frozen=True)
class LinearizationRecord:
    """Average squared gap between the decoder and its linearization."""

    magnitude: float
    gap: float


def unit_directions(n: int, count: int = 64, seed: int = 0) -> Array:
    """Fixed seeded set of unit action directions shared across states."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((count, n))
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return u / norms


def linearization_gap(
    decoder,
    states: Array,
    magnitudes: Sequence[float],
    n_directions: int = 64,
    seed: int = 0,
) -> list[LinearizationRecord]:
    """Mean of ||f(x, m u) - f(x, 0) - J(x, 0)(m u)||^2 over states and a
    fixed set of unit directions, for each action magnitude."""
    states = np.atleast_2d(as_f64(states))
    if states.size == 0:
        raise InputError("linearization sweep needs at least one state")
    mags = [float(m) for m in magnitudes]
    if any(m < 0 for m in mags) or sorted(mags) != mags:
        raise InputError("magnitudes must be sorted and nonnegative")
    dirs = unit_directions(decoder.action_dim, n_directions, seed)
    sums = np.zeros(len(mags))
    for x in states:
        j = jacobian_at_zero(decoder, x)
        f0 = decoder.velocity(x, np.zeros(decoder.action_dim))
        for k, m in enumerate(mags):
            actions = m * dirs
            pred = decoder.velocity(x, actions)
            lin = f0 + np.einsum("ij,bj->bi", j, actions)
            sums[k] += float(np.mean(np.sum((pred - lin) ** 2, axis=1)))
    sums /= states.shape[0]
    return [LinearizationRecord(m, g) for m, g in zip(mags, sums)]
