"""Calibration corpora, deterministic sample selection and activation statistics."""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import kernels
from .rng import SplitMix64, sample_indices
from .tensorstore import ModelManifest, read_container, write_container
from .tinyformer import CapturedActivations, ForwardConfig, forward

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 128
DEFAULT_SEQ_LEN = 128
TOKENIZERS = ("pretokenized", "byte_level")
ACTNORM_SUFFIX = ".actnorm"


class CorpusError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass
class CalibrationCorpus:
    records: list[list[int]]
    source_fingerprint: int
    dropped: int = 0
    path: str | None = None

    def __len__(self):
        return len(self.records)


@dataclass
class SampleSelection:
    samples: list[list[int]]
    indices: list[int]
    requested: int
    seed: int

    @property
    def shortfall(self) -> bool:
        return len(self.samples) < self.requested


@dataclass
class ActivationStats:
    norms: dict[str, np.ndarray]
    sample_count: int
    token_count: int
    seed: int
    corpus_fp: int

    def metadata(self) -> dict[str, str]:
        return {
            "seed": str(self.seed),
            "sample_count": str(self.sample_count),
            "token_count": str(self.token_count),
            "corpus_fp": str(self.corpus_fp),
        }

    def save(self, path) -> None:
        tensors = {name + ACTNORM_SUFFIX: vec.astype(np.float32) for name, vec in self.norms.items()}
        write_container(tensors, self.metadata(), path)

    @classmethod
    def load(cls, path) -> "ActivationStats":
        tensors, meta = read_container(path)
        missing = {"seed", "sample_count", "token_count", "corpus_fp"} - set(meta)
        if missing:
            raise CalibrationError(f"{path}: stats metadata lacks {sorted(missing)}")
        norms = {}
        for name, vec in tensors.items():
            if not name.endswith(ACTNORM_SUFFIX) or vec.ndim != 1 or vec.dtype != np.float32:
                raise CalibrationError(f"{path}: unexpected tensor {name!r} in stats container")
            norms[name[: -len(ACTNORM_SUFFIX)]] = vec
        return cls(
            norms=norms,
            sample_count=int(meta["sample_count"]),
            token_count=int(meta["token_count"]),
            seed=int(meta["seed"]),
            corpus_fp=int(meta["corpus_fp"]),
        )


def fingerprint(data: bytes) -> int:
    """FNV-1a 64-bit hash."""
    return kernels.fnv1a64(data)


def load_corpus(path, tokenizer: str, vocab_size: int, max_seq_len: int) -> CalibrationCorpus:
    """Read a JSONL corpus into token sequences.

    ``byte_level`` maps every UTF-8 byte of ``"text"`` to its value;
    ``pretokenized`` reads ``"tokens"`` verbatim. Records are truncated to
    ``max_seq_len`` and empty ones dropped.
    """
    if tokenizer not in TOKENIZERS:
        raise CorpusError(f"unknown tokenizer {tokenizer!r}; choose from {TOKENIZERS}")
    if tokenizer == "byte_level" and vocab_size < 256:
        raise CorpusError(f"byte_level tokenizer needs vocab_size >= 256, got {vocab_size}")
    with open(path, "rb") as fh:
        raw = fh.read()

    records, dropped = [], 0
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise CorpusError(f"{path}:{lineno}: expected a JSON object")
        if tokenizer == "byte_level":
            text = obj.get("text")
            if not isinstance(text, str):
                raise CorpusError(f"{path}:{lineno}: missing string field 'text'")
            seq = list(text.encode("utf-8"))
        else:
            seq = obj.get("tokens")
            if not isinstance(seq, list) or not all(
                isinstance(t, int) and not isinstance(t, bool) for t in seq
            ):
                raise CorpusError(f"{path}:{lineno}: missing integer list field 'tokens'")
            for t in seq:
                if not 0 <= t < vocab_size:
                    raise CorpusError(
                        f"{path}:{lineno}: token id {t} out of range for vocab_size {vocab_size}"
                    )
        seq = seq[:max_seq_len]
        if seq:
            records.append(seq)
        else:
            dropped += 1
    if dropped:
        log.warning("%s: dropped %d empty record(s)", path, dropped)
    return CalibrationCorpus(records, fingerprint(raw), dropped, str(path))


def select_samples(corpus: CalibrationCorpus, count: int, seed: int) -> SampleSelection:
    """Pick ``count`` distinct records via a SplitMix64-driven partial Fisher-Yates."""
    if count < 1:
        raise CalibrationError(f"sample count must be >= 1, got {count}")
    if not corpus.records:
        raise CalibrationError("empty corpus")
    idx = sample_indices(len(corpus.records), count, seed)
    if len(idx) < count:
        log.warning("shortfall: %d/%d calibration samples available", len(idx), count)
    return SampleSelection([corpus.records[i] for i in idx], idx, count, seed)


def capture_activations(
    checkpoint: Mapping[str, np.ndarray],
    manifest: ModelManifest,
    samples: Sequence[Sequence[int]],
    accumulator: CapturedActivations | None = None,
) -> CapturedActivations:
    acc = accumulator if accumulator is not None else CapturedActivations()
    cfg = ForwardConfig(capture_activations=True)
    for seq in samples:
        forward(checkpoint, manifest, seq, cfg, accumulator=acc)
    return acc


def finalize_stats(
    captured: CapturedActivations, sample_count: int, seed: int, corpus_fp: int
) -> ActivationStats:
    norms = {name: np.sqrt(sq).astype(np.float32) for name, sq in sorted(captured.sumsq.items())}
    for name, vec in norms.items():
        if not np.all(np.isfinite(vec)):
            raise CalibrationError(f"non-finite activation norm for {name}")
    return ActivationStats(norms, sample_count, captured.token_count, seed, corpus_fp)


def accumulate_stats(
    checkpoint: Mapping[str, np.ndarray],
    manifest: ModelManifest,
    samples: Sequence[Sequence[int]],
    seed: int = 0,
    corpus_fp: int = 0,
) -> ActivationStats:
    """Forward every sample in order and turn the captured sums into L2 norms."""
    if len(samples) == 0:
        raise CalibrationError("empty calibration set")
    captured = capture_activations(checkpoint, manifest, samples)
    return finalize_stats(captured, len(samples), seed, corpus_fp)


def calibrate(
    checkpoint, manifest: ModelManifest, corpus: CalibrationCorpus, count: int, seed: int
) -> tuple[ActivationStats, SampleSelection]:
    selection = select_samples(corpus, count, seed)
    stats = accumulate_stats(
        checkpoint, manifest, selection.samples, seed=seed, corpus_fp=corpus.source_fingerprint
    )
    return stats, selection


# Synthetic domains used by the pipeline demo and the acceptance tests.
# Every character below U+0080 encodes to one byte in 0..127; every character
# in U+0080..U+07FF encodes to two bytes in 128..255.
DOMAINS = {
    "low": [chr(c) for c in range(128)],
    "high": [chr(c) for c in range(0x80, 0x800, 13)],
}
_CHAIN_SEEDS = {"low": 0x1001, "high": 0x2002}


def markov_text(
    alphabet: Sequence[str],
    n_records: int,
    chain_seed: int,
    record_seed: int,
    min_len: int = 24,
    max_len: int = 96,
    fanout: int = 4,
) -> list[str]:
    """Records walked from a sparse random Markov chain over ``alphabet``.

    The transition table depends only on ``chain_seed``, so corpora built with
    different ``record_seed`` values are splits of the same domain.
    """
    k = len(alphabet)
    table_gen = SplitMix64(chain_seed)
    table = [[table_gen.bounded(k) for _ in range(fanout)] for _ in range(k)]
    gen = SplitMix64(record_seed)
    out = []
    for _ in range(n_records):
        length = min_len + gen.bounded(max_len - min_len + 1)
        state = gen.bounded(k)
        chars = []
        for _ in range(length):
            chars.append(alphabet[state])
            state = table[state][gen.bounded(fanout)]
        out.append("".join(chars))
    return out


def write_jsonl(path, texts: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text in texts:
            fh.write(json.dumps({"text": text}) + "\n")


def write_domain_corpus(path, domain: str, n_records: int, record_seed: int) -> None:
    """Write a byte_level JSONL corpus for one of the synthetic ``DOMAINS``."""
    write_jsonl(path, markov_text(DOMAINS[domain], n_records, _CHAIN_SEEDS[domain], record_seed))
