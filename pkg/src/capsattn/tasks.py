"""Synthetic sequence-to-sequence tasks.

Every sample is generated from its own RNG keyed by ``(seed, stream, index)``
so a batch depends only on which indices it covers, never on what was drawn
before it. Symbols 0, 1 and 2 are reserved for pad, begin and end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import EOS, PAD

FIRST_SYMBOL = 3
TRAIN_STREAM, EVAL_STREAM = 0, 1


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab: int = 20
    min_len: int = 1
    max_len: int = 12

    def __post_init__(self):
        if self.kind not in ("copy", "reverse", "sort"):
            raise ConfigError(f"unknown task {self.kind!r}")
        if self.vocab < FIRST_SYMBOL + 1:
            raise ConfigError("vocab must leave at least one symbol after pad/begin/end")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError(f"empty length range [{self.min_len}, {self.max_len}]")


def make_target(kind: str, seq) -> list[int]:
    seq = [int(x) for x in seq]
    if kind == "copy":
        return seq
    if kind == "reverse":
        return seq[::-1]
    if kind == "sort":
        return sorted(seq)
    raise ConfigError(f"unknown task {kind!r}")


def sample(spec: TaskSpec, seed: int, index: int, stream: int = TRAIN_STREAM) -> list[int]:
    rng = np.random.default_rng([seed, stream, index])
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    return rng.integers(FIRST_SYMBOL, spec.vocab, size=n).tolist()


def pad_batch(seqs, add_eos: bool = True) -> np.ndarray:
    seqs = [list(s) + ([EOS] if add_eos else []) for s in seqs]
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(spec: TaskSpec, seed: int, start: int, count: int, stream: int = TRAIN_STREAM):
    """Samples ``start .. start+count-1`` as padded ``(src, tgt)`` arrays,
    each sequence terminated by the end symbol."""
    seqs = [sample(spec, seed, i, stream) for i in range(start, start + count)]
    return pad_batch(seqs), pad_batch([make_target(spec.kind, s) for s in seqs])


def gen_task(spec: TaskSpec, seed: int, batch_size: int, n_batches: int | None = None, stream: int = TRAIN_STREAM):
    """Yield successive batches; infinite when ``n_batches`` is None."""
    k = 0
    while n_batches is None or k < n_batches:
        yield make_batch(spec, seed, k * batch_size, batch_size, stream)
        k += 1
