"""Run manifests and report serialization.

Every CLI run emits a manifest recording the resolved configuration, input
digests, seed, and tool version. Reports reference the manifest by
``manifest_id``, a hash over the stable fields only (wall time stays out),
so identical inputs and flags always produce byte-identical reports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

REPORT_DECIMALS = 6


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def round_floats(obj, places: int = REPORT_DECIMALS):
    """Recursively round floats so report bytes are diff-stable."""
    if isinstance(obj, float):
        return round(obj, places)
    if isinstance(obj, dict):
        return {k: round_floats(v, places) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, places) for v in obj]
    return obj


def write_json_report(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(round_floats(obj), indent=2) + "\n", encoding="utf-8")


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: dict[str, str]  # flag name -> content digest
    seed: int
    version: str
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def manifest_id(self) -> str:
        stable = {
            "subcommand": self.subcommand,
            "config": round_floats(self.config),
            "inputs": self.inputs,
            "seed": self.seed,
            "version": self.version,
        }
        return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "manifest_id": self.manifest_id,
            "subcommand": self.subcommand,
            "config": round_floats(self.config),
            "inputs": self.inputs,
            "seed": self.seed,
            "version": self.version,
            "wall_time_s": self.wall_time_s,
            **({"extra": self.extra} if self.extra else {}),
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def manifest_path_for(out: str | Path) -> Path:
    out = Path(out)
    if out.suffix:
        return out.with_suffix(out.suffix + ".manifest.json")
    return out / "run.manifest.json"
