"""Next-token perplexity of dense and pruned models on held-out corpora."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass

import numpy as np

from .calibration import CalibrationCorpus
from .pruner import MaskSet
from .tensorstore import ModelManifest
from .tinyformer import hidden_states, masked_weights, token_nll

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


@dataclass
class EvalResult:
    model_id: str
    masks_id: str
    corpus_id: str
    token_count: int
    nll: float
    perplexity: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _head(w, manifest):
    return w["tok_emb.weight"] if manifest.tie_embeddings else w["lm_head.weight"]


def evaluate(
    checkpoint: Mapping[str, np.ndarray],
    manifest: ModelManifest,
    corpus: CalibrationCorpus,
    masks: MaskSet | None = None,
    *,
    strict: bool = False,
    model_id: str = "",
    masks_id: str | None = None,
    corpus_id: str | None = None,
) -> EvalResult:
    """Mean next-token NLL over every sequence of ``corpus`` (length-1 records skipped).

    The held-out corpus must not be the one the masks were calibrated on;
    this is detected through the corpus fingerprint and is a warning, or an
    error when ``strict``.
    """
    if not corpus.records:
        raise EvalError("empty evaluation corpus")
    if masks is not None:
        calib_fp = masks.metadata.get("stats_corpus_fp")
        if calib_fp == str(corpus.source_fingerprint):
            msg = "evaluation corpus is identical to the masks' calibration corpus"
            if strict:
                raise EvalError(msg)
            log.warning(msg)

    w = masked_weights(checkpoint, masks) if masks is not None else checkpoint
    head = _head(w, manifest)
    total, count = 0.0, 0
    for seq in corpus.records:
        if len(seq) < 2:
            continue
        logits = hidden_states(w, manifest, seq[:-1]) @ head.T
        nll = token_nll(logits, np.asarray(seq[1:]))
        total += float(nll.sum())
        count += len(nll)
    if count == 0:
        raise EvalError("evaluation corpus has no sequence longer than one token")
    mean = total / count
    return EvalResult(
        model_id=model_id,
        masks_id=masks_id if masks_id is not None else ("dense" if masks is None else "masked"),
        corpus_id=corpus_id if corpus_id is not None else (corpus.path or ""),
        token_count=count,
        nll=mean,
        perplexity=math.exp(mean),
    )


def fit_readout(
    checkpoint: Mapping[str, np.ndarray],
    manifest: ModelManifest,
    corpus: CalibrationCorpus,
    steps: int = 150,
    lr: float = 0.5,
    max_rows: int = 4096,
) -> dict[str, np.ndarray]:
    """Refit ``lm_head`` by softmax regression on the dense model's final hidden states.

    A randomly generated model predicts nothing about any corpus, so dense vs
    pruned perplexity comparisons are only meaningful once the head has been
    adapted to the domain. The body stays random; only ``lm_head`` changes.
    Full-batch gradient descent from zero, so the result is deterministic.
    """
    if manifest.tie_embeddings:
        raise EvalError("fit_readout needs an untied lm_head")
    feats, targets = [], []
    rows = 0
    for seq in corpus.records:
        if len(seq) < 2:
            continue
        feats.append(hidden_states(checkpoint, manifest, seq[:-1]))
        targets.append(np.asarray(seq[1:]))
        rows += len(seq) - 1
        if rows >= max_rows:
            break
    if not feats:
        raise EvalError("corpus has no sequence longer than one token")
    h = np.concatenate(feats).astype(np.float64)[:max_rows]
    y = np.concatenate(targets)[:max_rows]
    n = len(y)
    weight = np.zeros((manifest.vocab_size, manifest.d_model))
    for _ in range(steps):
        z = h @ weight.T
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        weight -= lr * (p.T @ h) / n
    out = dict(checkpoint)
    out["lm_head.weight"] = weight.astype(np.float32)
    return out
