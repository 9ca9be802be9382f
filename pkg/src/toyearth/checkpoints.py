"""Checkpoint directories shared by every trainable component.

A checkpoint is a directory holding a weights blob (``weights.pt``) and a
human-readable ``manifest.json`` with the config, training metrics and a
content hash of the weights. The hash is computed over tensor names,
dtypes, shapes and raw bytes (not pickle bytes), so it is stable across
torch versions and serves as the provenance key other artifacts record.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

WEIGHTS_FILE = "weights.pt"
MANIFEST_FILE = "manifest.json"


class MissingCheckpointError(FileNotFoundError):
    """A required upstream checkpoint does not exist yet."""

    def __init__(self, path: Path | str, produced_by: str):
        self.produced_by = produced_by
        super().__init__(
            f"checkpoint not found at {path}; produce it first with `{produced_by}`"
        )


def state_dict_hash(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class CheckpointManifest:
    """Metadata describing one serialized model."""

    kind: str
    config: dict[str, Any]
    content_hash: str
    metrics: dict[str, Any] = field(default_factory=dict)
    dependencies: dict[str, str] = field(default_factory=dict)
    path: Path | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "config": self.config,
            "content_hash": self.content_hash,
            "metrics": self.metrics,
            "dependencies": self.dependencies,
        }


def save_checkpoint(
    path: Path | str,
    kind: str,
    state: dict[str, torch.Tensor],
    config: dict[str, Any],
    metrics: dict[str, Any] | None = None,
    dependencies: dict[str, str] | None = None,
) -> CheckpointManifest:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(state, path / WEIGHTS_FILE)
    manifest = CheckpointManifest(
        kind=kind,
        config=config,
        content_hash=state_dict_hash(state),
        metrics=metrics or {},
        dependencies=dependencies or {},
        path=path,
    )
    (path / MANIFEST_FILE).write_text(
        json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n"
    )
    return manifest


def load_manifest(path: Path | str, produced_by: str = "the producing command") -> CheckpointManifest:
    path = Path(path)
    manifest_path = path / MANIFEST_FILE
    if not manifest_path.exists():
        raise MissingCheckpointError(path, produced_by)
    raw = json.loads(manifest_path.read_text())
    return CheckpointManifest(
        kind=raw["kind"],
        config=raw["config"],
        content_hash=raw["content_hash"],
        metrics=raw.get("metrics", {}),
        dependencies=raw.get("dependencies", {}),
        path=path,
    )


def load_state(path: Path | str, produced_by: str = "the producing command") -> dict[str, torch.Tensor]:
    path = Path(path)
    weights = path / WEIGHTS_FILE
    if not weights.exists():
        raise MissingCheckpointError(path, produced_by)
    return torch.load(weights, map_location="cpu", weights_only=True)
