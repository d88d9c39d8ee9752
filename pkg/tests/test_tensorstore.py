import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subforge.tensorstore import (
    ContainerError,
    ManifestError,
    ModelManifest,
    generate_tiny_model,
    load_checkpoint,
    read_container,
    write_container,
)


def raw_header(path):
    blob = open(path, "rb").read()
    (n,) = struct.unpack("<Q", blob[:8])
    return json.loads(blob[8 : 8 + n]), blob[8 + n :]


def test_single_tensor_round_trip(tmp_path):
    path = tmp_path / "one.safetensors"
    write_container({"w": np.array([[1, 2], [3, 4]], dtype=np.float32)}, {}, path)
    tensors, meta = read_container(path)
    assert list(tensors) == ["w"]
    assert tensors["w"].shape == (2, 2)
    assert tensors["w"].ravel().tolist() == [1.0, 2.0, 3.0, 4.0]
    assert meta == {}


def test_rewrite_is_byte_identical(tmp_path, small_model):
    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    write_container(small_model, {"k": "v"}, a)
    tensors, meta = read_container(a)
    write_container(tensors, meta, b)
    assert a.read_bytes() == b.read_bytes()
    assert raw_header(a)[0] == raw_header(b)[0]


def test_empty_container(tmp_path):
    path = tmp_path / "empty.safetensors"
    write_container({}, {}, path)
    header, data = raw_header(path)
    assert header == {} and data == b""
    assert read_container(path) == ({}, {})


def test_lexicographic_order(tmp_path):
    path = tmp_path / "ab.safetensors"
    write_container({"b": np.zeros(2, np.float32), "a": np.ones(3, np.float32)}, {}, path)
    header, _ = raw_header(path)
    assert [k for k in header] == ["a", "b"]
    assert header["a"]["data_offsets"] == [0, 12]
    assert header["b"]["data_offsets"] == [12, 20]


def test_duplicate_name_rejected(tmp_path):
    arr = np.zeros(1, np.float32)
    with pytest.raises(ContainerError, match="duplicate"):
        write_container([("x", arr), ("x", arr)], {}, tmp_path / "d.safetensors")


def test_unsupported_dtype_on_write(tmp_path):
    with pytest.raises(ContainerError, match="unsupported dtype"):
        write_container({"x": np.zeros(2, np.float64)}, {}, tmp_path / "f64.safetensors")


def _write_raw(path, header, data=b""):
    blob = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + data)


def test_header_length_exceeds_file(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(ContainerError, match="malformed header length"):
        read_container(path)


def test_truncated_prefix(tmp_path):
    path = tmp_path / "short.safetensors"
    path.write_bytes(b"\x01\x02")
    with pytest.raises(ContainerError, match="malformed header length"):
        read_container(path)


def test_header_not_json(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(struct.pack("<Q", 5) + b"{oops")
    with pytest.raises(ContainerError, match="not valid JSON"):
        read_container(path)


def test_unsupported_dtype_on_read(tmp_path):
    path = tmp_path / "bad.safetensors"
    _write_raw(path, {"x": {"dtype": "F16", "shape": [1], "data_offsets": [0, 2]}}, b"\0\0")
    with pytest.raises(ContainerError, match="unsupported dtype"):
        read_container(path)


def test_overlapping_ranges(tmp_path):
    path = tmp_path / "bad.safetensors"
    header = {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
    }
    _write_raw(path, header, bytes(12))
    with pytest.raises(ContainerError, match="overlaps"):
        read_container(path)


def test_reversed_range(tmp_path):
    path = tmp_path / "bad.safetensors"
    _write_raw(path, {"a": {"dtype": "F32", "shape": [0], "data_offsets": [4, 0]}}, bytes(4))
    with pytest.raises(ContainerError, match="out of order"):
        read_container(path)


def test_range_past_end(tmp_path):
    path = tmp_path / "bad.safetensors"
    _write_raw(path, {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, bytes(4))
    with pytest.raises(ContainerError, match="exceeds file size"):
        read_container(path)


def test_gap_between_ranges(tmp_path):
    path = tmp_path / "bad.safetensors"
    header = {
        "a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
        "b": {"dtype": "F32", "shape": [1], "data_offsets": [8, 12]},
    }
    _write_raw(path, header, bytes(12))
    with pytest.raises(ContainerError, match="out of order"):
        read_container(path)


names = st.text(alphabet="abcdefgh._0123", min_size=1, max_size=8).filter(
    lambda s: s != "__metadata__"
)
shapes = st.lists(st.integers(0, 4), min_size=0, max_size=3)


@settings(max_examples=40, deadline=None)
@given(
    layout=st.dictionaries(names, shapes, max_size=5),
    meta=st.dictionaries(st.text(max_size=5), st.text(max_size=8), max_size=3),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_property(tmp_path_factory, layout, meta, seed):
    rng = np.random.default_rng(seed)
    tensors = {n: rng.standard_normal(s).astype(np.float32) for n, s in layout.items()}
    path = tmp_path_factory.mktemp("rt") / "x.safetensors"
    write_container(tensors, meta, path)
    got, got_meta = read_container(path)
    assert got_meta == meta
    assert set(got) == set(tensors)
    for n in tensors:
        assert got[n].tobytes() == tensors[n].tobytes()
        assert got[n].shape == tensors[n].shape

    header, data = raw_header(path)
    header.pop("__metadata__", None)
    spans = sorted(tuple(v["data_offsets"]) for v in header.values())
    cursor = 0
    for begin, end in spans:
        assert begin == cursor and end >= begin
        cursor = end
    assert cursor == len(data)


def test_manifest_validation():
    with pytest.raises(ManifestError, match="divisible"):
        ModelManifest(16, 8, 1, 3, 16, 32, 1e-5, False)
    with pytest.raises(ManifestError):
        ModelManifest(0, 8, 1, 2, 16, 32, 1e-5, False)
    with pytest.raises(ManifestError, match="missing"):
        ModelManifest.from_dict({"vocab_size": 16})


def test_manifest_json_round_trip(tmp_path, small_manifest):
    path = tmp_path / "m.json"
    small_manifest.save(path)
    assert set(json.loads(path.read_text())) == {
        "vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
        "max_seq_len", "norm_eps", "tie_embeddings",
    }
    assert ModelManifest.load(path) == small_manifest


def test_generate_is_deterministic_and_seed_sensitive(tmp_path, small_manifest):
    paths = [tmp_path / f"{i}.safetensors" for i in range(3)]
    for path, seed in zip(paths, (7, 7, 8)):
        write_container(generate_tiny_model(small_manifest, seed), {}, path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    a, b = generate_tiny_model(small_manifest, 7), generate_tiny_model(small_manifest, 8)
    assert any(not np.array_equal(a[n], b[n]) for n in a)


def test_generated_tensors_match_manifest(default_manifest):
    ck = generate_tiny_model(default_manifest, 3)
    assert {n: v.shape for n, v in ck.items()} == default_manifest.tensor_shapes()
    assert all(v.dtype == np.float32 for v in ck.values())
    assert np.all(ck["final_norm.weight"] == 1.0)
    bound = 1.0 / np.sqrt(default_manifest.d_model)
    q = ck["blocks.0.attn.q_proj.weight"]
    assert np.abs(q).max() <= bound and np.abs(q).max() > 0.9 * bound
    assert np.abs(ck["tok_emb.weight"]).max() <= 1.0


def test_tied_embeddings_drop_lm_head(small_manifest):
    tied = ModelManifest(**{**small_manifest.to_dict(), "tie_embeddings": True})
    assert "lm_head.weight" not in generate_tiny_model(tied, 1)


def test_load_checkpoint_uses_embedded_manifest(tmp_path, small_manifest, small_model):
    from subforge.tensorstore import checkpoint_metadata

    path = tmp_path / "m.safetensors"
    write_container(small_model, checkpoint_metadata(small_manifest, 7), path)
    tensors, manifest = load_checkpoint(path)
    assert manifest == small_manifest
    del tensors["final_norm.weight"]
    write_container(tensors, checkpoint_metadata(small_manifest), path)
    with pytest.raises(ContainerError, match="missing tensor"):
        load_checkpoint(path)
