"""Loss assembly, the mini-batch training loop, and the Lipschitz
projection applied after every gradient update.

The training objective is the reconstruction loss, optionally plus a
reversibility regularizer with three terms: the mirrored reconstruction
||(-xdot) - f(x, -a)||^2, the zero-action anchor ||f(x, 0)||^2, and the
zero-velocity anchor ||g(x, 0)||^2.  Each mini-batch therefore runs the
extra forward passes for -a, a = 0, and xdot = 0.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, DenseLayerParams, GradTape, TensorLayerParams
from .datasets import Dataset
from .errors import ConfigError, InputError, TrainingError
from .maps import CaeModel, encode

MIN_DATASET_SIZE = 20


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    regularize: bool = False
    reg_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lipschitz: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if any(w < 0 for w in self.reg_weights):
            raise ConfigError("regularizer weights must be nonnegative")


@dataclass
class LipschitzConfig:
    """Projection targets for the modified per-layer spectral constraint.

    ``target`` is the global bound; the per-layer bound defaults to
    target**(1/depth).  ``m_action`` seeds the running input-norm bound
    with the truncated maximal action norm.
    """

    target: float = 0.125
    lam: Optional[float] = None
    p: int = 2
    m_action: float = math.sqrt(2.0)

    def __post_init__(self):
        if self.target <= 0 or (self.lam is not None and self.lam <= 0):
            raise ConfigError("Lipschitz targets must be positive")
        if self.m_action <= 0:
            raise ConfigError("m_action must be positive")
        if self.p != 2:
            raise ConfigError("only p=2 projection is supported")

    def layer_lambda(self, depth: int) -> float:
        return self.lam if self.lam is not None else self.target ** (1.0 / depth)


@dataclass
class TrainReport:
    train_losses: list[float]
    val_losses: list[float]
    final_test_mse: float
    log10_test_mse: float
    wall_clock: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "final_test_mse": self.final_test_mse,
            "log10_test_mse": self.log10_test_mse,
            "wall_clock": self.wall_clock,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def recon_loss(xdot, pred):
    """0.5 ||xdot - pred||^2, averaged over the batch when 2-D."""
    v = ad._value(pred)
    diff = ad.sub(pred, xdot)
    factor = 0.5 / v.shape[0] if v.ndim == 2 else 0.5
    return ad.scale(ad.sum_sq(diff), factor)


def reversibility_regularizer(
    decoder, encoder, x, xdot, weights=(1.0, 1.0, 1.0), tape: Optional[GradTape] = None
):
    """Odd-behavior regularizer; zero for an exactly odd decoder with
    f(x, 0) = 0 and g(x, 0) = 0."""
    xv = ad._value(x)
    batch = xv.shape[0] if xv.ndim == 2 else 1
    zeros_a = np.zeros(ad._value(xdot).shape[:-1] + (encoder.action_dim,))
    zeros_xd = np.zeros_like(ad._value(xdot))

    a = encode(encoder, x, xdot, tape)
    mirrored = decoder.velocity(x, ad.neg(a) if tape is not None else -a, tape)
    t1 = ad.sum_sq(ad.sub(-ad._value(xdot), mirrored))
    t2 = ad.sum_sq(decoder.velocity(x, zeros_a, tape))
    t3 = ad.sum_sq(encode(encoder, x, zeros_xd, tape))
    w1, w2, w3 = weights
    total = ad.add(ad.add(ad.scale(t1, w1), ad.scale(t2, w2)), ad.scale(t3, w3))
    return ad.scale(total, 1.0 / batch)


def mse(targets: np.ndarray, preds: np.ndarray) -> float:
    """Plain mean squared error over every component."""
    targets = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    return float(np.mean((targets - preds) ** 2))


# ---------------------------------------------------------------------------
# dataset split
# ---------------------------------------------------------------------------


def split_dataset(ds: Dataset, fractions=(0.9, 0.05, 0.05), seed: int = 0):
    """Seeded shuffle then contiguous (train, val, test) split.

    Sizes are rounded down; the remainder goes to train.
    """
    if len(ds) < MIN_DATASET_SIZE:
        raise InputError(f"dataset has {len(ds)} samples, need >= {MIN_DATASET_SIZE}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"split fractions {fractions} do not sum to 1")
    n = len(ds)
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    return (
        ds.subset(perm[:n_train]),
        ds.subset(perm[n_train : n_train + n_val]),
        ds.subset(perm[n_train + n_val :]),
    )


# ---------------------------------------------------------------------------
# Lipschitz projection
# ---------------------------------------------------------------------------


def projection_layers(decoder) -> list:
    """The decoder layers walked by the projection, in forward order.

    The encoder is never projected; for scn the state-feature net stays
    unconstrained as well (the per-layer bound concerns the action path).
    """
    from .maps import AeDecoderParams, HyperLinearParams, ScnParams

    if isinstance(decoder, ScnParams):
        return list(decoder.layers)
    if isinstance(decoder, (AeDecoderParams, HyperLinearParams)):
        return list(decoder.mlp.layers)
    raise ConfigError(f"no projectable layers for {type(decoder).__name__}")


def _layer_matrix(layer) -> np.ndarray:
    """Reshape view whose operator norm bounds the layer's gain."""
    if isinstance(layer, TensorLayerParams):
        h, w, n = layer.H.shape
        return layer.H.reshape(h, w * n)
    if isinstance(layer, DenseLayerParams):
        return layer.weight
    raise ConfigError(f"unsupported layer kind {type(layer).__name__}")


def _abs_row_sums(layer) -> np.ndarray:
    if isinstance(layer, TensorLayerParams):
        return np.abs(layer.H).sum(axis=(1, 2))
    return np.abs(layer.weight).sum(axis=1)


def lipschitz_project(decoder, lip: LipschitzConfig, activation: Optional[str] = None):
    """Scale each decoder layer so A * ||H_bar||_2 <= lambda, walking the
    running input-norm bound A from the truncated action norm.

    A is advanced with the heuristic ||sigma(sum_jk |H_ijk|)||_2 evaluated
    on the already-projected weights.  Mutates the weights in place and
    returns the per-layer (lambda, sigma_before, scale) diagnostics.
    """
    layers = projection_layers(decoder)
    if activation is None:
        activation = getattr(decoder, "activation", None) or getattr(
            getattr(decoder, "mlp", None), "activation", "tanh"
        )
    lam = lip.layer_lambda(len(layers))
    a_bound = lip.m_action
    diag = []
    for i, layer in enumerate(layers):
        mat = _layer_matrix(layer)
        sigma = ad.layer_spectral_norm(layer, mat)
        scale = max(1.0, a_bound * sigma / lam)
        if scale > 1.0:
            np.divide(mat, scale, out=mat)
        diag.append((lam, sigma, scale))
        kind = activation if i < len(layers) - 1 else "identity"
        a_bound = float(np.linalg.norm(ad.activation(kind, _abs_row_sums(layer))))
    return diag


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _total_loss(model: CaeModel, x, xdot, cfg: TrainConfig, tape: GradTape):
    a = encode(model.encoder, x, xdot, tape)
    pred = model.decode(x, a, tape)
    loss = recon_loss(xdot, pred)
    if cfg.regularize:
        reg = reversibility_regularizer(
            model.decoder, model.encoder, x, xdot, cfg.reg_weights, tape
        )
        loss = ad.add(loss, reg)
    return loss


def evaluate_loss(model: CaeModel, ds: Dataset, cfg: TrainConfig) -> float:
    """Objective value on a dataset without recording gradients."""
    if len(ds) == 0:
        return float("nan")
    tape = None
    a = encode(model.encoder, ds.states, ds.velocities)
    pred = model.decode(ds.states, a)
    loss = recon_loss(ds.velocities, pred)
    if cfg.regularize:
        loss += reversibility_regularizer(
            model.decoder, model.encoder, ds.states, ds.velocities, cfg.reg_weights, tape
        )
    return float(loss)


def evaluate_mse(model: CaeModel, ds: Dataset) -> float:
    a = encode(model.encoder, ds.states, ds.velocities)
    pred = model.decode(ds.states, a)
    return mse(ds.velocities, pred)


def train(
    model: CaeModel,
    splits: tuple[Dataset, Dataset, Dataset],
    cfg: TrainConfig,
    lip: Optional[LipschitzConfig] = None,
) -> TrainReport:
    """Shuffled mini-batch Adam on the CAE objective.

    When ``lip`` is given the projection runs after every optimizer step.
    Deterministic for a fixed seed; the model is trained in place.
    """
    train_ds, val_ds, _ = splits
    if len(train_ds) == 0:
        raise InputError("empty training split")
    if cfg.lipschitz and lip is None:
        raise ConfigError("cfg.lipschitz is set but no LipschitzConfig was given")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_params())
    state = AdamState(lr=cfg.lr)
    n = len(train_ds)
    train_losses: list[float] = []
    val_losses: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[lo : lo + cfg.batch_size]
            x = train_ds.states[idx]
            xd = train_ds.velocities[idx]
            tape = GradTape()
            loss = _total_loss(model, x, xd, cfg, tape)
            lval = float(loss.value)
            if not math.isfinite(lval):
                raise TrainingError(f"nonfinite loss at epoch {epoch}, batch {bi}")
            grads = ad.backward(tape, loss)
            grad_dict = {name: grads.wrt_array(arr) for name, arr in params.items()}
            ad.adam_step(params, grad_dict, state)
            if lip is not None:
                lipschitz_project(model.decoder, lip)
            epoch_loss += lval * len(idx)
        train_losses.append(epoch_loss / n)
        val_losses.append(evaluate_loss(model, val_ds, cfg))
    test_mse = evaluate_mse(model, splits[2]) if len(splits[2]) else float("nan")
    log10_mse = math.log10(test_mse) if test_mse > 0 else -math.inf
    return TrainReport(
        train_losses=train_losses,
        val_losses=val_losses,
        final_test_mse=test_mse,
        log10_test_mse=log10_mse,
        wall_clock=time.perf_counter() - start,
        seed=cfg.seed,
    )
