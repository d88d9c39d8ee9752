"""safetensors container I/O, the model manifest and the tiny-model generator.

Container layout: an 8-byte little-endian header length ``N``, ``N`` bytes of
UTF-8 JSON, then the raw data region. Offsets in the header are relative to
the start of the data region.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from importlib import resources
from typing import Union

import numpy as np

from .rng import SplitMix64

__all__ = [
    "ContainerError",
    "ManifestError",
    "ModelManifest",
    "read_container",
    "write_container",
    "generate_tiny_model",
    "load_checkpoint",
    "check_checkpoint",
    "PROJECTIONS",
]

# f32 is the only model dtype; u8 exists solely for packed mask bits.
DTYPES = {"F32": np.dtype("<f4"), "U8": np.dtype("u1")}
_DTYPE_NAMES = {np.dtype("<f4"): "F32", np.dtype("u1"): "U8"}

PROJECTIONS = (
    "attn.q_proj",
    "attn.k_proj",
    "attn.v_proj",
    "attn.o_proj",
    "mlp.gate_proj",
    "mlp.up_proj",
    "mlp.down_proj",
)

PathLike = Union[str, os.PathLike]


class ContainerError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ModelManifest:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    norm_eps: float
    tie_embeddings: bool

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, field)
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise ManifestError(f"{field} must be a positive integer, got {value!r}")
        if isinstance(self.norm_eps, bool) or not isinstance(self.norm_eps, (int, float)):
            raise ManifestError(f"norm_eps must be a positive float, got {self.norm_eps!r}")
        if not (self.norm_eps > 0 and math.isfinite(self.norm_eps)):
            raise ManifestError(f"norm_eps must be a positive float, got {self.norm_eps!r}")
        if not isinstance(self.tie_embeddings, bool):
            raise ManifestError("tie_embeddings must be a boolean")
        if self.d_model % self.n_heads:
            raise ManifestError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if (self.d_model // self.n_heads) % 2:
            raise ManifestError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelManifest":
        expected = {f.name for f in dataclasses.fields(cls)}
        got = set(data)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ManifestError(f"manifest fields mismatch: missing={missing} unexpected={extra}")
        return cls(**{k: data[k] for k in expected})

    @classmethod
    def load(cls, path: PathLike) -> "ModelManifest":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ManifestError("manifest must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def default(cls) -> "ModelManifest":
        text = resources.files("subforge").joinpath("data/default_manifest.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every tensor name the manifest implies, with its shape."""
        d, f = self.d_model, self.d_ff
        proj_shapes = {
            "attn.q_proj": (d, d),
            "attn.k_proj": (d, d),
            "attn.v_proj": (d, d),
            "attn.o_proj": (d, d),
            "mlp.gate_proj": (f, d),
            "mlp.up_proj": (f, d),
            "mlp.down_proj": (d, f),
        }
        shapes = {"tok_emb.weight": (self.vocab_size, d), "final_norm.weight": (d,)}
        for i in range(self.n_layers):
            shapes[f"blocks.{i}.attn_norm.weight"] = (d,)
            shapes[f"blocks.{i}.mlp_norm.weight"] = (d,)
            for proj, shape in proj_shapes.items():
                shapes[f"blocks.{i}.{proj}.weight"] = shape
        if not self.tie_embeddings:
            shapes["lm_head.weight"] = (self.vocab_size, d)
        return shapes

    def prunable_names(self) -> list[str]:
        return [f"blocks.{i}.{p}.weight" for i in range(self.n_layers) for p in PROJECTIONS]


def _dtype_name(arr: np.ndarray) -> str:
    try:
        return _DTYPE_NAMES[arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype]
    except KeyError:
        raise ContainerError(f"unsupported dtype {arr.dtype}") from None


def write_container(
    tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
    metadata: Mapping[str, str] | None,
    path: PathLike,
) -> None:
    """Serialize ``tensors`` in lexicographic name order.

    Identical input always produces identical bytes. The header is padded with
    spaces to a multiple of 8 bytes so the data region stays aligned.
    """
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ContainerError(f"duplicate tensor name(s): {dupes}")
    if "__metadata__" in names:
        raise ContainerError("'__metadata__' is reserved")

    header: dict = {}
    if metadata:
        for key, value in metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ContainerError("metadata must map strings to strings")
        header["__metadata__"] = {k: metadata[k] for k in sorted(metadata)}

    chunks = []
    offset = 0
    for name, arr in sorted(items, key=lambda kv: kv[0]):
        arr = np.asarray(arr)
        dtype = _dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()
        header[name] = {
            "dtype": dtype,
            "shape": [int(s) for s in arr.shape],
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)

    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def read_container(path: PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Load every tensor of a container plus its ``__metadata__`` map."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_container(raw)


def parse_container(raw: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(raw) < 8:
        raise ContainerError("malformed header length: file shorter than 8 bytes")
    (n,) = struct.unpack_from("<Q", raw, 0)
    if 8 + n > len(raw):
        raise ContainerError(f"malformed header length: {n} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"header not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError("header not valid JSON: expected an object")

    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ContainerError("__metadata__ must map strings to strings")

    data = memoryview(raw)[8 + n :]
    spans = []
    for name, info in header.items():
        try:
            dtype_name, shape, (begin, end) = info["dtype"], info["shape"], info["data_offsets"]
        except (TypeError, KeyError, ValueError) as exc:
            raise ContainerError(f"tensor {name!r}: malformed header entry") from exc
        if dtype_name not in DTYPES:
            raise ContainerError(f"tensor {name!r}: unsupported dtype {dtype_name}")
        if not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ContainerError(f"tensor {name!r}: invalid shape {shape}")
        if not (isinstance(begin, int) and isinstance(end, int)) or begin < 0 or end < begin:
            raise ContainerError(f"tensor {name!r}: byte range out of order {[begin, end]}")
        nbytes = math.prod(shape) * DTYPES[dtype_name].itemsize
        if end - begin != nbytes:
            raise ContainerError(
                f"tensor {name!r}: byte range length {end - begin} does not match shape {shape}"
            )
        spans.append((begin, end, name, dtype_name, shape))

    spans.sort()
    cursor = 0
    for begin, end, name, _, _ in spans:
        if begin < cursor:
            raise ContainerError(f"tensor {name!r}: byte range overlaps the previous tensor")
        if begin > cursor:
            raise ContainerError(f"tensor {name!r}: byte ranges out of order (gap at {cursor})")
        if end > len(data):
            raise ContainerError(f"tensor {name!r}: byte range exceeds file size")
        cursor = end
    if cursor != len(data):
        raise ContainerError(f"data region has {len(data) - cursor} trailing bytes")

    tensors = {}
    for begin, end, name, dtype_name, shape in spans:
        arr = np.frombuffer(data[begin:end], dtype=DTYPES[dtype_name]).reshape(shape)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return dict(sorted(tensors.items())), dict(metadata)


def check_checkpoint(tensors: Mapping[str, np.ndarray], manifest: ModelManifest) -> None:
    """Raise if a tensor implied by ``manifest`` is missing or mis-shaped."""
    for name, shape in manifest.tensor_shapes().items():
        if name not in tensors:
            raise ContainerError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != shape:
            raise ContainerError(
                f"tensor {name!r} has shape {tuple(tensors[name].shape)}, manifest implies {shape}"
            )


def generate_tiny_model(manifest: ModelManifest, seed: int) -> dict[str, np.ndarray]:
    """Random checkpoint drawn from one SplitMix64 stream.

    Tensors are filled in lexicographic name order. Norm weights are ones,
    the token embedding is uniform in [-1, 1) and every projection (including
    ``lm_head``) is uniform in [-1, 1) scaled by ``1/sqrt(d_model)``.
    """
    gen = SplitMix64(seed)
    scale = 1.0 / math.sqrt(manifest.d_model)
    out = {}
    for name, shape in sorted(manifest.tensor_shapes().items()):
        if name.endswith("norm.weight"):
            out[name] = np.ones(shape, dtype=np.float32)
            continue
        values = gen.uniform(math.prod(shape)).reshape(shape)
        if name != "tok_emb.weight":
            values = values * scale
        out[name] = values.astype(np.float32)
    return out


def checkpoint_metadata(manifest: ModelManifest, seed: int | None = None) -> dict[str, str]:
    meta = {"manifest": manifest.to_json()}
    if seed is not None:
        meta["seed"] = str(seed)
    return meta


def load_checkpoint(
    path: PathLike, manifest: ModelManifest | None = None
) -> tuple[dict[str, np.ndarray], ModelManifest]:
    """Read a checkpoint, taking the manifest from its metadata when not given."""
    tensors, meta = read_container(path)
    if manifest is None:
        if "manifest" not in meta:
            raise ManifestError(f"{path}: no manifest given and none embedded in the checkpoint")
        manifest = ModelManifest.from_dict(json.loads(meta["manifest"]))
    check_checkpoint(tensors, manifest)
    return tensors, manifest
