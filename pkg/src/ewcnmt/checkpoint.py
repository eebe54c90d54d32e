"""On-disk tensor directories shared by checkpoints and Fisher maps.

A directory holds ``manifest`` (JSON) and one raw little-endian float32 file
per tensor, named after the canonical parameter name with ``.`` replaced by
``__``. Directories are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CompatibilityError, ContractError
from .transformer import ModelConfig

FORMAT_VERSION = 1
MANIFEST = "manifest"


def tensor_filename(name: str) -> str:
    return name.replace(".", "__")


def content_id(tensors: Mapping[str, np.ndarray]) -> str:
    """Location-independent short hash of names, shapes and bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_tensor_dir(path, tensors: Mapping[str, np.ndarray], manifest: dict) -> dict:
    """Atomically write ``tensors`` plus ``manifest``; returns the stored manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["shapes"] = {n: list(np.shape(tensors[n])) for n in sorted(tensors)}
    manifest["id"] = content_id(tensors)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            with open(tmp / tensor_filename(name), "wb") as fh:
                fh.write(arr.tobytes())
        with open(tmp / MANIFEST, "w", encoding="utf-8") as fh:
            fh.write(dump_json(manifest))
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def read_tensor_dir(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with open(path / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"no manifest in {path}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CompatibilityError(f"{path}: unsupported format version {manifest.get('format_version')}")
    tensors = {}
    for name, shape in manifest["shapes"].items():
        with open(path / tensor_filename(name), "rb") as fh:
            raw = fh.read()
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        if arr.size != int(np.prod(shape)):
            raise ContractError(f"{path}: tensor {name} has {arr.size} values, expected shape {shape}")
        tensors[name] = arr.reshape(shape)
    return tensors, manifest


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: ModelConfig
    step: int = 0
    seed: int = 0
    kind: str = "nmt"  # "nmt", "lm" or "average"
    metrics: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def id(self) -> str:
        return content_id(self.params)

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "step": self.step,
            "seed": self.seed,
            "metrics": self.metrics,
            **self.extra,
        }


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    write_tensor_dir(path, ckpt.params, ckpt.manifest())
    ckpt.path = Path(path)
    return ckpt.path


def load_checkpoint(path) -> Checkpoint:
    params, manifest = read_tensor_dir(path)
    if "config" not in manifest:
        raise CompatibilityError(f"{path} is not a model checkpoint")
    reserved = {"kind", "config", "step", "seed", "metrics", "format_version", "shapes", "id"}
    return Checkpoint(
        params=params,
        config=ModelConfig.from_dict(manifest["config"]),
        step=manifest.get("step", 0),
        seed=manifest.get("seed", 0),
        kind=manifest.get("kind", "nmt"),
        metrics=manifest.get("metrics", []),
        extra={k: v for k, v in manifest.items() if k not in reserved},
        path=Path(path),
    )
