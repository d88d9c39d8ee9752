"""Wanda and magnitude scoring, mask selection and mask files.

Within every comparison group (a row, the whole tensor, or an aligned block
of ``m`` weights along the input dimension) the ``k`` lowest-scoring weights
are pruned. Ties are ordered by flat index, smaller index pruned first, so a
mask is a pure function of its scores.
"""

from __future__ import annotations

import json
import math
import os
import re
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensorstore import read_container, write_container

METHODS = ("wanda", "magnitude")
GROUPS = ("per_row", "per_layer", "nm")
MASK_SUFFIX = ".mask"

_PRUNABLE = re.compile(r"^blocks\.\d+\.(attn\.[qkvo]_proj|mlp\.(gate|up|down)_proj)\.weight$")


class PruneError(ValueError):
    pass


def is_prunable(name: str) -> bool:
    return _PRUNABLE.match(name) is not None


def layer_index(name: str) -> int | None:
    m = re.match(r"^blocks\.(\d+)\.", name)
    return int(m.group(1)) if m else None


def parse_nm(text: str) -> tuple[int, int]:
    try:
        n, m = (int(part) for part in text.split(":"))
    except ValueError:
        raise PruneError(f"N:M pattern must look like '2:4', got {text!r}") from None
    _check_nm((n, m))
    return n, m


def _check_nm(nm) -> None:
    n, m = nm
    if not 0 < n < m:
        raise PruneError(f"N:M pattern needs 0 < n < m, got {n}:{m}")


def _check_sparsity(s) -> None:
    if s is None or not (0.0 <= s <= 1.0):
        raise PruneError(f"invalid sparsity {s!r}: must lie in [0, 1]")


@dataclass
class PruneMask:
    """Packed keep-bits for one tensor: row-major, LSB-first, 1 = kept."""

    name: str
    shape: tuple[int, int]
    bits: np.ndarray
    sparsity: float | None = None
    method: str = "wanda"
    group: str = "per_row"
    nm: tuple[int, int] | None = None

    @classmethod
    def from_keep(cls, name: str, keep: np.ndarray, **kw) -> "PruneMask":
        keep = np.asarray(keep, dtype=bool)
        if keep.ndim != 2:
            raise PruneError(f"mask for {name!r} must be 2-D, got shape {keep.shape}")
        bits = np.packbits(keep.ravel(), bitorder="little")
        return cls(name, tuple(int(s) for s in keep.shape), bits, **kw)

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    def keep(self) -> np.ndarray:
        flat = np.unpackbits(self.bits, count=self.size, bitorder="little")
        return flat.reshape(self.shape).astype(bool)

    def kept_count(self) -> int:
        return int(np.bitwise_count(self.bits).sum())

    def sparsity_label(self) -> str:
        return f"{self.nm[0]}:{self.nm[1]}" if self.group == "nm" else repr(self.sparsity)


def score(weights: np.ndarray, method: str, norms: np.ndarray | None = None) -> np.ndarray:
    """Importance of every weight: ``|W| * a`` for wanda, ``|W|`` for magnitude."""
    w = np.asarray(weights, dtype=np.float32)
    if w.ndim != 2:
        raise PruneError(f"can only score 2-D tensors, got shape {w.shape}")
    mag = np.abs(w)
    if method == "magnitude":
        return mag
    if method != "wanda":
        raise PruneError(f"unknown method {method!r}")
    if norms is None:
        raise PruneError("wanda requires activation stats")
    a = np.asarray(norms, dtype=np.float32)
    if a.shape != (w.shape[1],):
        raise PruneError(f"norm vector has shape {a.shape}, expected ({w.shape[1]},)")
    return mag * a[None, :]


def prune_count(sparsity: float, group_size: int) -> int:
    return math.floor(sparsity * group_size)


def make_mask(
    scores: np.ndarray,
    group: str = "per_row",
    sparsity: float | None = None,
    nm: tuple[int, int] | None = None,
    *,
    name: str = "",
    method: str = "wanda",
) -> PruneMask:
    scores = np.ascontiguousarray(scores, dtype=np.float32)
    if scores.ndim != 2:
        raise PruneError(f"scores must be 2-D, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)) or np.any(scores < 0):
        raise PruneError(f"scores for {name!r} must be finite and non-negative")
    rows, cols = scores.shape

    if group == "per_row":
        _check_sparsity(sparsity)
        keep = kernels.prune_lowest(scores, prune_count(sparsity, cols))
    elif group == "per_layer":
        _check_sparsity(sparsity)
        flat = scores.reshape(1, -1)
        keep = kernels.prune_lowest(flat, prune_count(sparsity, flat.shape[1])).reshape(rows, cols)
    elif group == "nm":
        if nm is None:
            raise PruneError("group 'nm' needs an (n, m) pattern")
        _check_nm(nm)
        n, m = nm
        if cols % m:
            raise PruneError(f"m={m} does not divide in_features={cols} for {name!r}")
        blocks = scores.reshape(-1, m)
        keep = kernels.prune_lowest(blocks, m - n).reshape(rows, cols)
        sparsity = 1.0 - n / m
    else:
        raise PruneError(f"unknown group {group!r}; choose from {GROUPS}")

    return PruneMask.from_keep(
        name, keep, sparsity=sparsity, method=method, group=group,
        nm=tuple(nm) if group == "nm" else None,
    )


def apply_mask(weights: np.ndarray, mask: PruneMask) -> np.ndarray:
    """New array equal to ``weights`` where kept and +0.0 elsewhere."""
    if tuple(weights.shape) != tuple(mask.shape):
        raise PruneError(
            f"mask shape {tuple(mask.shape)} does not match weight shape {tuple(weights.shape)}"
        )
    return np.where(mask.keep(), weights, np.zeros((), dtype=weights.dtype))


@dataclass
class PruneRecipe:
    method: str
    group: str = "per_row"
    sparsity: float | None = None
    nm: tuple[int, int] | None = None
    stats: object | None = None  # calibration.ActivationStats

    def validate(self) -> None:
        if self.method not in METHODS:
            raise PruneError(f"unknown method {self.method!r}")
        if self.group not in GROUPS:
            raise PruneError(f"unknown group {self.group!r}")
        if self.method == "wanda" and self.stats is None:
            raise PruneError("wanda requires activation stats")
        if self.method == "magnitude" and self.stats is not None:
            raise PruneError("magnitude pruning takes no activation stats")
        if self.group == "nm":
            if self.nm is None:
                raise PruneError("group 'nm' needs an (n, m) pattern")
            _check_nm(self.nm)
        else:
            _check_sparsity(self.sparsity)

    def metadata(self) -> dict[str, str]:
        meta = {"method": self.method, "group": self.group}
        if self.group == "nm":
            meta["nm"] = f"{self.nm[0]}:{self.nm[1]}"
        else:
            meta["sparsity"] = repr(float(self.sparsity))
        if self.stats is not None:
            meta["stats_seed"] = str(self.stats.seed)
            meta["stats_corpus_fp"] = str(self.stats.corpus_fp)
        else:
            meta["stats_seed"] = "none"
            meta["stats_corpus_fp"] = "none"
        return meta


@dataclass
class MaskSet:
    masks: dict[str, PruneMask]
    metadata: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, name):
        return self.masks[name]

    def items(self):
        return self.masks.items()

    def names(self) -> list[str]:
        return sorted(self.masks)

    def save(self, path) -> None:
        meta = dict(self.metadata)
        meta["shapes"] = json.dumps(
            {name: list(self.masks[name].shape) for name in self.names()}, separators=(",", ":")
        )
        tensors = {name + MASK_SUFFIX: mask.bits for name, mask in self.masks.items()}
        write_container(tensors, meta, path)

    @classmethod
    def load(cls, path) -> "MaskSet":
        tensors, meta = read_container(path)
        if "shapes" not in meta:
            raise PruneError(f"{path}: mask metadata lacks 'shapes'")
        shapes = json.loads(meta.pop("shapes"))
        group = meta.get("group", "per_row")
        nm = parse_nm(meta["nm"]) if "nm" in meta else None
        sparsity = float(meta["sparsity"]) if "sparsity" in meta else None
        masks = {}
        for key, bits in tensors.items():
            if not key.endswith(MASK_SUFFIX) or bits.dtype != np.uint8 or bits.ndim != 1:
                raise PruneError(f"{path}: unexpected tensor {key!r} in mask container")
            name = key[: -len(MASK_SUFFIX)]
            if name not in shapes:
                raise PruneError(f"{path}: no shape recorded for {name!r}")
            shape = tuple(shapes[name])
            if bits.size != -(-shape[0] * shape[1] // 8):
                raise PruneError(f"{path}: {name!r} has {bits.size} bytes for shape {shape}")
            masks[name] = PruneMask(
                name, shape, bits, sparsity=sparsity, method=meta.get("method", ""),
                group=group, nm=nm,
            )
        return cls(masks, meta)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FORGE_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


def prune_model(
    checkpoint: Mapping[str, np.ndarray], recipe: PruneRecipe
) -> tuple[dict[str, np.ndarray], MaskSet]:
    """Score and mask every prunable tensor; copy the rest verbatim."""
    recipe.validate()
    names = sorted(n for n in checkpoint if is_prunable(n))
    if not names:
        raise PruneError("checkpoint has no prunable tensors")
    if recipe.method == "wanda":
        missing = [n for n in names if n not in recipe.stats.norms]
        if missing:
            raise PruneError(f"activation stats missing for {missing[:3]}")

    def one(name):
        norms = recipe.stats.norms[name] if recipe.method == "wanda" else None
        s = score(checkpoint[name], recipe.method, norms)
        return make_mask(
            s, recipe.group, recipe.sparsity, recipe.nm, name=name, method=recipe.method
        )

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        masks = dict(zip(names, pool.map(one, names)))

    pruned = dict(checkpoint)
    for name, mask in masks.items():
        pruned[name] = apply_mask(checkpoint[name], mask)
    return pruned, MaskSet(masks, recipe.metadata())


def verify_mask(
    mask: PruneMask, group: str, sparsity: float | None = None, nm: tuple[int, int] | None = None
) -> list[str]:
    """Describe every group of ``mask`` that breaks the declared structure."""
    keep = mask.keep()
    rows, cols = mask.shape
    problems = []
    if group == "per_row":
        want = cols - prune_count(sparsity, cols)
        for r, got in enumerate(keep.sum(axis=1)):
            if got != want:
                problems.append(f"{mask.name}: row {r} keeps {got}, expected {want}")
    elif group == "per_layer":
        want = mask.size - prune_count(sparsity, mask.size)
        got = int(keep.sum())
        if got != want:
            problems.append(f"{mask.name}: layer keeps {got}, expected {want}")
    elif group == "nm":
        n, m = nm
        if cols % m:
            return [f"{mask.name}: m={m} does not divide in_features={cols}"]
        counts = keep.reshape(rows, cols // m, m).sum(axis=2)
        for r, b in zip(*np.nonzero(counts != n)):
            problems.append(
                f"{mask.name}: row {r} block {b} (cols {b * m}-{b * m + m - 1}) "
                f"keeps {counts[r, b]}, expected {n}"
            )
    else:
        raise PruneError(f"unknown group {group!r}")
    return problems
