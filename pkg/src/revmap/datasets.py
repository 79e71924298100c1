"""Dataset container and its on-disk schema.

A dataset file is a JSON header line (state dim, action source, stride,
gamma, arm description, seed) followed by one row per sample: d state
values then d velocity values, comma separated, printed with full 64-bit
round-trip precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

FORMAT_NAME = "revmap-dataset-v1"


@dataclass
class Dataset:
    """(state, velocity) pairs plus the metadata needed to regenerate them."""

    states: np.ndarray
    velocities: np.ndarray
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        if self.states.shape != self.velocities.shape:
            raise InputError(
                f"states {self.states.shape} and velocities {self.velocities.shape} disagree"
            )
        if self.states.ndim != 2:
            raise InputError(f"expected 2-D sample arrays, got {self.states.shape}")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.states[idx], self.velocities[idx], dict(self.header))

    def state_box(self, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the states, optionally inflated by
        ``margin`` (absolute, per dimension)."""
        lo = self.states.min(axis=0) - margin
        hi = self.states.max(axis=0) + margin
        return lo, hi


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    header = dict(ds.header)
    header["format"] = FORMAT_NAME
    header["state_dim"] = ds.state_dim
    header["samples"] = len(ds)
    lines = [json.dumps(header, sort_keys=True)]
    for s, v in zip(ds.states, ds.velocities):
        lines.append(",".join(repr(float(x)) for x in (*s, *v)))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset file not found: {path}")
    with path.open() as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT_NAME:
            raise InputError(f"{path} is not a {FORMAT_NAME} file")
        d = int(header["state_dim"])
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = [float(tok) for tok in line.split(",")]
            if len(vals) != 2 * d:
                raise InputError(f"row with {len(vals)} values, expected {2 * d}")
            rows.append(vals)
    if not rows:
        raise InputError(f"dataset {path} has no samples")
    arr = np.array(rows, dtype=np.float64)
    return Dataset(arr[:, :d], arr[:, d:], header)
