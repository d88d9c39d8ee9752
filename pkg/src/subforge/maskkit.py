"""Compare pruning masks: Jaccard distances and grayscale PGM images."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .pruner import MaskSet, PruneMask, layer_index

# render_diff legend
PIXEL_BOTH_PRUNED = 0
PIXEL_BOTH_KEPT = 128
PIXEL_DIFFER = 255


class MaskMismatch(ValueError):
    pass


def _check_pair(a: PruneMask, b: PruneMask, check_name: bool = True) -> None:
    if check_name and a.name != b.name:
        raise MaskMismatch(f"comparing masks of different tensors: {a.name!r} vs {b.name!r}")
    if tuple(a.shape) != tuple(b.shape):
        raise MaskMismatch(f"{a.name!r}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


def jaccard_distance(a: PruneMask, b: PruneMask) -> float:
    """``1 - |Ka & Kb| / |Ka | Kb|`` over kept positions; 0 when both are empty."""
    _check_pair(a, b)
    inter, union = kernels.popcount_and_or(a.bits.tobytes(), b.bits.tobytes())
    if union == 0:
        return 0.0
    return 1.0 - inter / union


@dataclass
class JaccardReport:
    tensors: dict[str, float]
    layers: dict[str, float]
    global_distance: float
    a_meta: dict[str, str] = field(default_factory=dict)
    b_meta: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tensors": dict(sorted(self.tensors.items())),
            "layers": dict(sorted(self.layers.items(), key=lambda kv: int(kv[0]))),
            "global": self.global_distance,
            "a_meta": dict(sorted(self.a_meta.items())),
            "b_meta": dict(sorted(self.b_meta.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def compare_models(a: MaskSet, b: MaskSet, weighting: str = "mean") -> JaccardReport:
    """Per-tensor, per-layer and global Jaccard distances between two mask sets.

    ``weighting="mean"`` averages tensor distances unweighted; ``"size"``
    weights each tensor by its element count.
    """
    names_a, names_b = set(a.masks), set(b.masks)
    if names_a != names_b:
        raise MaskMismatch(
            f"mask sets cover different tensors: {sorted(names_a ^ names_b)}"
        )
    if weighting not in ("mean", "size"):
        raise ValueError(f"unknown weighting {weighting!r}")

    tensors = {n: jaccard_distance(a[n], b[n]) for n in sorted(names_a)}

    def avg(names):
        w = np.array([a[n].size if weighting == "size" else 1.0 for n in names], dtype=np.float64)
        d = np.array([tensors[n] for n in names], dtype=np.float64)
        return float((w * d).sum() / w.sum()) if len(names) else 0.0

    by_layer = defaultdict(list)
    for n in tensors:
        idx = layer_index(n)
        if idx is not None:
            by_layer[idx].append(n)
    layers = {str(i): avg(by_layer[i]) for i in sorted(by_layer)}
    return JaccardReport(tensors, layers, avg(sorted(tensors)), dict(a.metadata), dict(b.metadata))


def write_pgm(pixels: np.ndarray, path) -> None:
    """Binary PGM (P5), maxval 255."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {pixels.shape}")
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    width, height = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos + 1)
    return data.reshape(height, width)


def weight_pixels(weights: np.ndarray) -> np.ndarray:
    w = np.abs(np.asarray(weights, dtype=np.float64))
    if w.ndim != 2:
        raise ValueError(f"can only render 2-D tensors, got shape {w.shape}")
    peak = w.max() if w.size else 0.0
    if peak == 0:
        return np.zeros(w.shape, dtype=np.uint8)
    # round half up
    return np.floor(255.0 * w / peak + 0.5).astype(np.uint8)


def render_weights(weights: np.ndarray, path) -> None:
    """One pixel per weight, ``round(255 * |w| / max|w|)``; matrix rows are image rows."""
    write_pgm(weight_pixels(weights), path)


def diff_pixels(a: PruneMask, b: PruneMask) -> np.ndarray:
    _check_pair(a, b, check_name=False)
    ka, kb = a.keep(), b.keep()
    out = np.full(ka.shape, PIXEL_BOTH_PRUNED, dtype=np.uint8)
    out[ka & kb] = PIXEL_BOTH_KEPT
    out[ka ^ kb] = PIXEL_DIFFER
    return out


def render_diff(a: PruneMask, b: PruneMask, path) -> None:
    write_pgm(diff_pixels(a, b), path)


def render_mask(mask: PruneMask, path) -> None:
    write_pgm(mask.keep().astype(np.uint8) * 255, path)
