"""Self-describing checkpoint documents.

A checkpoint is one JSON file holding the architecture descriptor (family,
layer sizes, activation, strict-odd flag, action space) plus flat 64-bit
parameter arrays in declaration order.  Matrix parameters are flattened
row-major; floats are printed with round-trip precision, so save/load is
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import DenseLayerParams, TensorLayerParams
from .errors import InputError
from .maps import (
    ActionSpace,
    AeDecoderParams,
    CaeModel,
    EncoderParams,
    HyperLinearParams,
    MlpParams,
    ScnParams,
)

FORMAT_NAME = "revmap-checkpoint-v1"


def _array_doc(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _array_from(doc: dict) -> np.ndarray:
    return np.array(doc["data"], dtype=np.float64).reshape(doc["shape"])


def _mlp_doc(mlp: MlpParams) -> dict:
    layers = []
    for layer in mlp.layers:
        entry = {"weight": _array_doc(layer.weight)}
        if layer.bias is not None:
            entry["bias"] = _array_doc(layer.bias)
        layers.append(entry)
    return {"activation": mlp.activation, "layers": layers}


def _mlp_from(doc: dict) -> MlpParams:
    layers = []
    for entry in doc["layers"]:
        bias = _array_from(entry["bias"]) if "bias" in entry else None
        layers.append(DenseLayerParams(_array_from(entry["weight"]), bias))
    return MlpParams(layers, doc["activation"])


def model_to_dict(model: CaeModel) -> dict:
    doc = {
        "format": FORMAT_NAME,
        "family": model.family,
        "state_dim": model.state_dim,
        "space": {
            "n": model.space.n,
            "c": model.space.c,
            "max_norm": model.space.max_norm,
        },
        "encoder": _mlp_doc(model.encoder.mlp),
        "meta": model.meta,
    }
    dec = model.decoder
    if isinstance(dec, AeDecoderParams):
        doc["decoder"] = {"mlp": _mlp_doc(dec.mlp)}
    elif isinstance(dec, HyperLinearParams):
        doc["decoder"] = {"mlp": _mlp_doc(dec.mlp)}
    elif isinstance(dec, ScnParams):
        layers = []
        for layer in dec.layers:
            entry = {"H": _array_doc(layer.H)}
            if layer.B is not None:
                entry["B"] = _array_doc(layer.B)
            layers.append(entry)
        doc["decoder"] = {
            "phi": _mlp_doc(dec.phi),
            "layers": layers,
            "activation": dec.activation,
            "strict_odd": dec.strict_odd,
        }
    else:
        raise InputError(f"cannot serialize decoder type {type(dec).__name__}")
    return doc


def model_from_dict(doc: dict) -> CaeModel:
    if doc.get("format") != FORMAT_NAME:
        raise InputError(f"not a {FORMAT_NAME} document")
    space = ActionSpace(**doc["space"])
    d = int(doc["state_dim"])
    n = space.n
    encoder = EncoderParams(_mlp_from(doc["encoder"]), d, n)
    family = doc["family"]
    dd = doc["decoder"]
    if family == "ae":
        decoder = AeDecoderParams(_mlp_from(dd["mlp"]), d, n)
    elif family == "scl":
        decoder = HyperLinearParams(_mlp_from(dd["mlp"]), d, n)
    elif family == "scn":
        layers = []
        for entry in dd["layers"]:
            b = _array_from(entry["B"]) if "B" in entry else None
            layers.append(TensorLayerParams(_array_from(entry["H"]), b))
        decoder = ScnParams(
            _mlp_from(dd["phi"]),
            layers,
            dd["activation"],
            dd["strict_odd"],
            state_dim=d,
            action_dim=n,
        )
    else:
        raise InputError(f"unknown model family {family!r} in checkpoint")
    return CaeModel(family, encoder, decoder, space, dict(doc.get("meta", {})))


def save_checkpoint(model: CaeModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True))


def load_checkpoint(path) -> CaeModel:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint file not found: {path}")
    return model_from_dict(json.loads(path.read_text()))
