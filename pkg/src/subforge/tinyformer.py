"""LLaMA-style decoder-only forward pass in float32.

Pre-norm RMSNorm, rotary position embeddings (base 10000, half-split
pairing), SwiGLU MLP, no biases. One sequence per call. The inputs that
reach each of the seven projection matrices in a block can be captured as
running per-channel sums of squares.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .tensorstore import PROJECTIONS, ModelManifest

ROPE_BASE = 10000.0


class ForwardError(ValueError):
    pass


@dataclass
class ForwardConfig:
    capture_activations: bool = False
    apply_masks: Mapping | None = None  # tensor name -> PruneMask
    max_seq_len: int | None = None


@dataclass
class CapturedActivations:
    """Per prunable tensor: sum over processed tokens of each input channel squared."""

    sumsq: dict[str, np.ndarray] = field(default_factory=dict)
    token_count: int = 0

    def add(self, name: str, inputs: np.ndarray) -> None:
        sq = np.square(inputs.astype(np.float64)).sum(axis=0)
        if name in self.sumsq:
            self.sumsq[name] += sq
        else:
            self.sumsq[name] = sq

    def merge(self, other: "CapturedActivations") -> "CapturedActivations":
        out = CapturedActivations({k: v.copy() for k, v in self.sumsq.items()}, self.token_count)
        for name, sq in other.sumsq.items():
            if name in out.sumsq:
                out.sumsq[name] = out.sumsq[name] + sq
            else:
                out.sumsq[name] = sq.copy()
        out.token_count += other.token_count
        return out


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + np.float32(eps))) * weight


def rope_tables(seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate ``x`` of shape (heads, seq, head_dim); pairs are (i, i + head_dim/2)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def masked_weights(checkpoint: Mapping[str, np.ndarray], masks: Mapping) -> dict[str, np.ndarray]:
    """Copy of ``checkpoint`` with every masked tensor zeroed where its bit is clear."""
    from .pruner import apply_mask

    out = dict(checkpoint)
    for name, mask in masks.items():
        if name not in checkpoint:
            raise ForwardError(f"mask refers to unknown tensor {name!r}")
        if tuple(mask.shape) != tuple(checkpoint[name].shape):
            raise ForwardError(
                f"mask for {name!r} has shape {tuple(mask.shape)}, "
                f"tensor has {tuple(checkpoint[name].shape)}"
            )
        out[name] = apply_mask(checkpoint[name], mask)
    return out


def forward(
    checkpoint: Mapping[str, np.ndarray],
    manifest: ModelManifest,
    tokens: Sequence[int],
    config: ForwardConfig | None = None,
    accumulator: CapturedActivations | None = None,
):
    """Run one sequence and return logits of shape (len(tokens), vocab_size).

    With ``config.capture_activations`` the result is ``(logits, captured)``;
    passing ``accumulator`` continues an existing capture in place.
    """
    config = config or ForwardConfig()
    w = masked_weights(checkpoint, config.apply_masks) if config.apply_masks else checkpoint
    capture = None
    if config.capture_activations:
        capture = accumulator if accumulator is not None else CapturedActivations()
    x = hidden_states(w, manifest, tokens, config.max_seq_len, capture)
    head = w["tok_emb.weight"] if manifest.tie_embeddings else w["lm_head.weight"]
    logits = x @ head.T
    if capture is not None:
        return logits, capture
    return logits


def hidden_states(
    w: Mapping[str, np.ndarray],
    manifest: ModelManifest,
    tokens: Sequence[int],
    max_seq_len: int | None = None,
    capture: CapturedActivations | None = None,
) -> np.ndarray:
    """Final-norm hidden states (seq, d_model), i.e. the inputs of the output head."""
    max_len = max_seq_len or manifest.max_seq_len
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or not 1 <= len(tokens) <= max_len:
        raise ForwardError(f"sequence length {tokens.size} outside [1, {max_len}]")
    if tokens.min() < 0 or tokens.max() >= manifest.vocab_size:
        bad = int(tokens[(tokens < 0) | (tokens >= manifest.vocab_size)][0])
        raise ForwardError(f"token id {bad} out of range for vocab_size {manifest.vocab_size}")

    eps = manifest.norm_eps
    n_heads, hd = manifest.n_heads, manifest.head_dim
    seq = len(tokens)
    cos, sin = rope_tables(seq, hd)
    causal = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    scale = np.float32(1.0 / np.sqrt(hd))

    x = w["tok_emb.weight"][tokens].astype(np.float32)
    for i in range(manifest.n_layers):
        p = f"blocks.{i}."
        h = rms_norm(x, w[p + "attn_norm.weight"], eps)
        if capture is not None:
            for proj in PROJECTIONS[:3]:
                capture.add(f"{p}{proj}.weight", h)
        q = (h @ w[p + "attn.q_proj.weight"].T).reshape(seq, n_heads, hd).transpose(1, 0, 2)
        k = (h @ w[p + "attn.k_proj.weight"].T).reshape(seq, n_heads, hd).transpose(1, 0, 2)
        v = (h @ w[p + "attn.v_proj.weight"].T).reshape(seq, n_heads, hd).transpose(1, 0, 2)
        q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        att = (q @ k.transpose(0, 2, 1)) * scale
        att[:, causal] = -np.inf
        ctx = (_softmax_rows(att) @ v).transpose(1, 0, 2).reshape(seq, manifest.d_model)
        if capture is not None:
            capture.add(p + "attn.o_proj.weight", ctx)
        x = x + ctx @ w[p + "attn.o_proj.weight"].T

        h = rms_norm(x, w[p + "mlp_norm.weight"], eps)
        if capture is not None:
            capture.add(p + "mlp.gate_proj.weight", h)
            capture.add(p + "mlp.up_proj.weight", h)
        gate = h @ w[p + "mlp.gate_proj.weight"].T
        with np.errstate(over="ignore"):
            act = gate / (np.float32(1.0) + np.exp(-gate)) * (h @ w[p + "mlp.up_proj.weight"].T)
        if capture is not None:
            capture.add(p + "mlp.down_proj.weight", act)
        x = x + act @ w[p + "mlp.down_proj.weight"].T

    if capture is not None:
        capture.token_count += seq
    return rms_norm(x, w["final_norm.weight"], eps)


def logits_to_nll(logits: np.ndarray, targets: Sequence[int]) -> float:
    """Mean negative log-likelihood (nats/token) of ``targets`` under ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ValueError(
            f"length mismatch: {logits.shape[0] if logits.ndim == 2 else logits.shape} "
            f"logit rows vs {len(targets)} targets"
        )
    return float(token_nll(logits, targets).mean())


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return log_z - shifted[np.arange(len(targets)), targets]
