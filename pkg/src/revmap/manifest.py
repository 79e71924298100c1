"""Experiment manifests and flat key=value configuration.

Every CLI run writes a manifest next to its primary output: the command,
the fully resolved configuration, the seed, input/output paths, and the
toolkit version.  Replaying a manifest re-dispatches the command with the
recorded configuration and must reproduce the outputs bit-exactly
(reports carry a wall-clock field, which is excluded from that claim).

Configuration sources, lowest to highest precedence: config file
(``key=value`` lines, ``#`` comments), environment variables
(``REVMAP_<KEY>``), command-line flags.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import InputError

ENV_PREFIX = "REVMAP_"


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def env_overrides(keys) -> dict[str, str]:
    out = {}
    for key in keys:
        val = os.environ.get(ENV_PREFIX + key.upper().replace("-", "_"))
        if val is not None:
            out[key] = val
    return out


def resolve_config(keys, file_path=None, cli: dict | None = None) -> dict[str, str]:
    """Merge config file, environment, and CLI values for ``keys``."""
    merged: dict[str, str] = {}
    if file_path:
        file_cfg = parse_config_file(file_path)
        unknown = set(file_cfg) - set(keys)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    merged.update(env_overrides(keys))
    if cli:
        merged.update({k: str(v) for k, v in cli.items() if v is not None})
    return merged


@dataclass
class ExperimentManifest:
    """Everything needed to bit-reproduce one CLI run."""

    command: str
    config: dict
    seed: int
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @staticmethod
    def load(path) -> "ExperimentManifest":
        path = Path(path)
        if not path.exists():
            raise InputError(f"manifest file not found: {path}")
        doc = json.loads(path.read_text())
        return ExperimentManifest(
            command=doc["command"],
            config=doc["config"],
            seed=doc["seed"],
            inputs=doc.get("inputs", []),
            outputs=doc.get("outputs", []),
            version=doc.get("version", "unknown"),
        )


def manifest_path(output_path) -> Path:
    return Path(str(output_path) + ".manifest.json")
