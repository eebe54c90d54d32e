"""Diagonal Fisher estimation and the elastic weight consolidation penalty."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, read_tensor_dir, write_tensor_dir
from .data import MonolingualExample, collate
from .losses import lm_loss
from .errors import CompatibilityError, ConfigError, ContractError, DataError, NumericError


@dataclass
class FisherMap:
    values: dict[str, np.ndarray]
    source: str = ""
    held_out: str = ""
    count: int = 0
    side: str = ""

    def restrict(self, names) -> "FisherMap":
        missing = sorted(set(names) - set(self.values))
        if missing:
            raise ContractError(f"Fisher map lacks entries for {missing[:5]}")
        return FisherMap({n: self.values[n] for n in names}, self.source, self.held_out, self.count, self.side)

    def save(self, path) -> Path:
        manifest = {
            "kind": "fisher",
            "source_checkpoint": self.source,
            "held_out": self.held_out,
            "examples": self.count,
            "side": self.side,
        }
        write_tensor_dir(path, self.values, manifest)
        return Path(path)

    @classmethod
    def load(cls, path) -> "FisherMap":
        values, manifest = read_tensor_dir(path)
        if manifest.get("kind") != "fisher":
            raise CompatibilityError(f"{path} is not a Fisher map")
        return cls(values, manifest["source_checkpoint"], manifest["held_out"], manifest["examples"], manifest["side"])


@dataclass(frozen=True)
class AnchorParams:
    """Frozen copy of pretrained values that the penalty pulls towards."""

    values: Mapping[str, np.ndarray]
    source: str = ""

    def __post_init__(self):
        frozen = {}
        for name, arr in self.values.items():
            arr = np.array(arr, dtype=np.float32, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "values", frozen)

    def keys(self):
        return self.values.keys()


@dataclass(frozen=True)
class EWCTerm:
    anchor: AnchorParams
    fisher: FisherMap
    lam: float

    def __post_init__(self):
        a, f = set(self.anchor.keys()), set(self.fisher.values)
        if a != f:
            raise ContractError(f"anchor and Fisher key sets differ: {sorted(a ^ f)[:5]}")
        for name in a:
            if self.anchor.values[name].shape != self.fisher.values[name].shape:
                raise ContractError(f"anchor/Fisher shape mismatch for {name}")
        names = sorted(a)
        object.__setattr__(self, "_names", names)
        object.__setattr__(self, "_weights", {n: (self.lam * self.fisher.values[n]).astype(np.float32) for n in names})

    def penalty(self, params: Mapping[str, Tensor]) -> Tensor:
        """Same value as :func:`ewc_penalty`, with ``lam * F`` cached."""
        if self.lam == 0.0 or not self._names:
            return ewc_penalty(params, self.anchor, self.fisher, 0.0)
        return _penalty(params, self._names, self.anchor, self._weights)


def held_out_id(examples: Sequence[MonolingualExample]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(np.asarray(ex.ids, dtype="<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def fisher_diagonal(
    example_loglik: Callable[[dict[str, Tensor], object], Tensor],
    params: Mapping[str, np.ndarray],
    examples: Sequence,
) -> dict[str, np.ndarray]:
    """Empirical Fisher: mean over examples of the squared gradient of each
    example's log-likelihood. Parameters the likelihood never touches get 0."""
    if len(examples) == 0:
        raise DataError("cannot estimate Fisher information from an empty held-out set")
    acc = {n: np.zeros(np.shape(v), dtype=np.float64) for n, v in params.items()}
    for i, ex in enumerate(examples):
        grads = ad.backward(example_loglik(ad.parameters(params), ex))
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name!r} on held-out example {i}")
            g = g.astype(np.float64)
            acc[name] += g * g
    n = float(len(examples))
    return {name: (a / n).astype(np.float32) for name, a in acc.items()}


def estimate_fisher_diagonal(ckpt: Checkpoint, held_out: Sequence[MonolingualExample]) -> FisherMap:
    """Fisher diagonal of a language-model checkpoint, one sentence at a time
    with dropout disabled. Gradients are taken in float64; the map is stored
    in float32."""
    if ckpt.kind != "lm":
        raise CompatibilityError("Fisher estimation needs a language-model checkpoint")
    side = ckpt.extra["lm_task"]["side"]
    config = ckpt.config

    def loglik(params, ex):
        batch = collate([ex], side=side)
        return lm_loss(params, config, batch, side=side, reduction="sum") * -1.0

    params = {n: np.asarray(v, dtype=np.float64) for n, v in ckpt.params.items()}
    values = fisher_diagonal(loglik, params, held_out)
    return FisherMap(values, source=ckpt.id, held_out=held_out_id(held_out), count=len(held_out), side=side)


def _penalty(current: Mapping[str, Tensor], names: Sequence[str], anchor: AnchorParams, weights: Mapping[str, np.ndarray]) -> Tensor:
    missing = [n for n in names if n not in current]
    if missing:
        raise ContractError(f"anchored parameters missing from the model: {missing[:5]}")
    parents = [current[n] for n in names]
    dtype = parents[0].dtype
    scaled = []
    total = 0.0
    for n, p in zip(names, parents):
        w = weights[n]
        if w.shape != p.shape:
            raise ContractError(f"Fisher shape {w.shape} does not match parameter {n} {p.shape}")
        delta = p.data - anchor.values[n]
        wd = (w * delta).astype(dtype, copy=False)
        total += float(np.vdot(wd, delta))
        scaled.append(wd)

    def backward(g):
        if float(g) == 1.0:
            return tuple(scaled)
        return tuple(g * wd for wd in scaled)

    return ad.record(np.asarray(0.5 * total, dtype=dtype), parents, backward)


def ewc_penalty(current: Mapping[str, Tensor], anchor: AnchorParams, fisher: FisherMap, lam: float) -> Tensor:
    """Sum of ``lam/2 * F_i * (theta_i - theta*_i)**2`` over anchored
    coordinates. Parameters outside the anchor contribute nothing, and the
    gradient is ``lam * F_i * (theta_i - theta*_i)``."""
    names = sorted(anchor.keys())
    if set(names) != set(fisher.values):
        raise ContractError("anchor and Fisher key sets differ")
    if lam == 0.0 or not names:
        dtype = current[names[0]].dtype if names and names[0] in current else np.float32
        return Tensor(np.zeros((), dtype=dtype))
    weights = {n: (lam * fisher.values[n]).astype(np.float32) for n in names}
    return _penalty(current, names, anchor, weights)


def combine_penalties(src: Tensor | None = None, tgt: Tensor | None = None) -> Tensor:
    if src is None and tgt is None:
        raise ConfigError("EWC regularization needs a source-side and/or target-side term")
    if src is None:
        return tgt
    if tgt is None:
        return src
    return src + tgt


def ewc_terms_penalty(params: Mapping[str, Tensor], src: EWCTerm | None, tgt: EWCTerm | None) -> Tensor:
    return combine_penalties(
        src.penalty(params) if src is not None else None,
        tgt.penalty(params) if tgt is not None else None,
    )

