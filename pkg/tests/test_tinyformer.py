import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reference import reference_forward
from subforge.pruner import PruneMask
from subforge.tensorstore import ModelManifest, generate_tiny_model
from subforge.tinyformer import (
    CapturedActivations,
    ForwardConfig,
    ForwardError,
    apply_rope,
    forward,
    logits_to_nll,
    rms_norm,
    rope_tables,
)


def test_shape_contract(small_manifest, small_model):
    logits = forward(small_model, small_manifest, [1, 2, 3, 15])
    assert logits.shape == (4, 16)
    assert logits.dtype == np.float32
    assert np.all(np.isfinite(logits))


def test_matches_reference_forward(two_layer_manifest):
    ck = generate_tiny_model(two_layer_manifest, 11)
    tokens = [3, 31, 0, 7, 7, 19]
    want, _ = reference_forward(ck, two_layer_manifest, tokens)
    got = forward(ck, two_layer_manifest, tokens)
    np.testing.assert_allclose(got, np.array(want), rtol=1e-4, atol=1e-5)


def test_tied_head_matches_reference(small_manifest):
    tied = ModelManifest(**{**small_manifest.to_dict(), "tie_embeddings": True})
    ck = generate_tiny_model(tied, 5)
    want, _ = reference_forward(ck, tied, [4, 9, 1])
    np.testing.assert_allclose(forward(ck, tied, [4, 9, 1]), np.array(want), rtol=1e-4, atol=1e-5)


def test_single_token_capture_matches_hand_rolled_block(two_layer_manifest):
    ck = generate_tiny_model(two_layer_manifest, 4)
    _, ref_inputs = reference_forward(ck, two_layer_manifest, [13])
    _, cap = forward(ck, two_layer_manifest, [13], ForwardConfig(capture_activations=True))
    assert cap.token_count == 1
    assert set(cap.sumsq) == set(two_layer_manifest.prunable_names())
    for name, vecs in ref_inputs.items():
        expected = np.array(vecs[0]) ** 2
        np.testing.assert_allclose(cap.sumsq[name], expected, rtol=1e-5, atol=1e-9)
    # layer-0 q_proj sees exactly the normalized embedding
    emb = ck["tok_emb.weight"][13].astype(np.float64)
    h = emb / math.sqrt(np.mean(emb**2) + two_layer_manifest.norm_eps)
    np.testing.assert_allclose(cap.sumsq["blocks.0.attn.q_proj.weight"], h**2, rtol=1e-5)


def test_multi_token_capture_matches_reference(two_layer_manifest):
    ck = generate_tiny_model(two_layer_manifest, 4)
    tokens = [5, 6, 7, 30, 2]
    _, ref_inputs = reference_forward(ck, two_layer_manifest, tokens)
    _, cap = forward(ck, two_layer_manifest, tokens, ForwardConfig(capture_activations=True))
    assert cap.token_count == len(tokens)
    for name, vecs in ref_inputs.items():
        np.testing.assert_allclose(
            cap.sumsq[name], (np.array(vecs) ** 2).sum(axis=0), rtol=1e-4, atol=1e-8
        )


def test_token_count_is_additive(small_manifest, small_model):
    cfg = ForwardConfig(capture_activations=True)
    acc = CapturedActivations()
    forward(small_model, small_manifest, [1, 2, 3], cfg, accumulator=acc)
    forward(small_model, small_manifest, [4, 5], cfg, accumulator=acc)
    assert acc.token_count == 5
    _, one = forward(small_model, small_manifest, [1, 2, 3], cfg)
    _, two = forward(small_model, small_manifest, [4, 5], cfg)
    merged = one.merge(two)
    assert merged.token_count == 5
    for name in acc.sumsq:
        np.testing.assert_array_equal(merged.sumsq[name], acc.sumsq[name])


@settings(max_examples=25, deadline=None)
@given(
    tokens=st.lists(st.integers(0, 15), min_size=2, max_size=12),
    pos=st.integers(0, 11),
    new=st.integers(0, 15),
)
def test_causality(small_manifest, small_model, tokens, pos, new):
    pos = pos % len(tokens)
    changed = list(tokens)
    changed[pos] = new
    a = forward(small_model, small_manifest, tokens)
    b = forward(small_model, small_manifest, changed)
    np.testing.assert_array_equal(a[:pos], b[:pos])


def test_rmsnorm_unit_mean_square():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 64)).astype(np.float32) * 7
    y = rms_norm(x, np.ones(64, np.float32), 1e-12)
    np.testing.assert_allclose(np.mean(y.astype(np.float64) ** 2, axis=1), 1.0, atol=1e-5)


def test_rope_preserves_norms():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((4, 50, 16)).astype(np.float32)
    cos, sin = rope_tables(50, 16)
    r = apply_rope(q, cos, sin)
    np.testing.assert_allclose(np.linalg.norm(r, axis=-1), np.linalg.norm(q, axis=-1), rtol=1e-5)
    np.testing.assert_array_equal(r[:, 0], q[:, 0])


def _random_masks(ck, manifest, rng, density):
    masks = {}
    for name in manifest.prunable_names():
        keep = rng.random(ck[name].shape) < density
        masks[name] = PruneMask.from_keep(name, keep)
    return masks


def test_identity_masks_give_identical_logits(small_manifest, small_model):
    rng = np.random.default_rng(0)
    masks = _random_masks(small_model, small_manifest, rng, 1.1)
    tokens = [1, 5, 9, 2]
    a = forward(small_model, small_manifest, tokens)
    b = forward(small_model, small_manifest, tokens, ForwardConfig(apply_masks=masks))
    assert a.tobytes() == b.tobytes()


def test_masked_forward_equals_zeroed_checkpoint(two_layer_manifest):
    rng = np.random.default_rng(3)
    ck = generate_tiny_model(two_layer_manifest, 3)
    masks = _random_masks(ck, two_layer_manifest, rng, 0.5)
    zeroed = dict(ck)
    for name, m in masks.items():
        w = ck[name].copy()
        w[~m.keep()] = 0.0
        zeroed[name] = w
    tokens = [0, 4, 8, 31, 9]
    a = forward(ck, two_layer_manifest, tokens, ForwardConfig(apply_masks=masks))
    b = forward(zeroed, two_layer_manifest, tokens)
    assert a.tobytes() == b.tobytes()


def test_forward_errors(small_manifest, small_model):
    with pytest.raises(ForwardError, match="out of range"):
        forward(small_model, small_manifest, [16])
    with pytest.raises(ForwardError, match="sequence length"):
        forward(small_model, small_manifest, [])
    with pytest.raises(ForwardError, match="sequence length"):
        forward(small_model, small_manifest, [1] * 33)
    bad = {"blocks.0.attn.q_proj.weight": PruneMask.from_keep("x", np.ones((2, 2)))}
    with pytest.raises(ForwardError, match="shape"):
        forward(small_model, small_manifest, [1], ForwardConfig(apply_masks=bad))


def test_nll_near_one_hot():
    assert logits_to_nll(np.array([[1000.0, 0, 0, 0]]), [0]) < 1e-6


def test_nll_uniform():
    assert logits_to_nll(np.zeros((5, 16)), [0, 3, 7, 15, 2]) == pytest.approx(math.log(16), abs=1e-12)
    assert math.log(16) == pytest.approx(2.7726, abs=1e-4)


def test_nll_against_extended_precision_oracle():
    rng = np.random.default_rng(5)
    logits = (rng.standard_normal((12, 40)) * 6).astype(np.float32)
    targets = rng.integers(0, 40, 12)
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, t in zip(logits.tolist(), targets.tolist()):
        z = mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row)
        total += mpmath.log(z) - mpmath.mpf(row[t])
    oracle = float(total / len(targets))
    assert abs(logits_to_nll(logits, targets) - oracle) < 1e-5


def test_nll_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        logits_to_nll(np.zeros((3, 4)), [0, 1])
