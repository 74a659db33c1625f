"""Scaled dot-product attention and multi-head projection.

Per-head results are kept unconcatenated (``MultiHeadOutput.stacked``) so the
capsule layer can treat each head as an input capsule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Module, Parameter, xavier_uniform
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class MultiHeadConfig:
    d_model: int
    h: int

    def __post_init__(self):
        if self.h < 1 or self.d_model % self.h:
            raise ConfigError(f"d_model={self.d_model} is not divisible by h={self.h}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.h

    @property
    def d_v(self) -> int:
        return self.d_model // self.h


@dataclass(frozen=True)
class AttentionMask:
    """Boolean keep-pattern broadcastable to ``[..., q, s]``."""

    kind: Literal["none", "causal", "padding", "combined"]
    keep: np.ndarray

    def __post_init__(self):
        if not np.all(self.keep.any(axis=-1)):
            raise ShapeError("attention mask drops every key for some query row")

    @classmethod
    def none(cls, q: int, s: int) -> "AttentionMask":
        return cls("none", np.ones((q, s), dtype=bool))

    @classmethod
    def causal(cls, q: int) -> "AttentionMask":
        return cls("causal", np.tril(np.ones((q, q), dtype=bool)))

    @classmethod
    def padding(cls, key_keep: np.ndarray, q: int) -> "AttentionMask":
        """``key_keep [B, s]`` marks real (non-pad) keys; expands to ``[B, 1, q, s]``."""
        keep = np.broadcast_to(key_keep[:, None, None, :], (key_keep.shape[0], 1, q, key_keep.shape[1]))
        return cls("padding", np.ascontiguousarray(keep))

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        return AttentionMask("combined", np.logical_and(self.keep, other.keep))

    def bias(self, dtype) -> np.ndarray:
        return np.where(self.keep, 0.0, MASK_VALUE).astype(dtype)


def scaled_dot_attention(q, k, v, mask: AttentionMask | None = None):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    Returns ``(output [..., q, d_v], weights [..., q, s])``.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(x) for x in (q, k, v))
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    logits = (q @ T.transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        qn, sn = logits.shape[-2:]
        if mask.keep.shape[-2:] != (qn, sn):
            raise ShapeError(f"mask pattern {mask.keep.shape} does not match ({qn}, {sn})")
        logits = logits + mask.bias(logits.dtype)
    weights = T.softmax(logits, axis=-1)
    return weights @ v, weights


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _as_stack(weights) -> Tensor:
    if isinstance(weights, Tensor):
        return weights
    return T.stack(list(weights), axis=0)


def _project(x: Tensor, w: Tensor) -> Tensor:
    """``x [B, T, d]`` times each head's ``w[i] [d, d_k]`` -> ``[B, h, T, d_k]``."""
    h, d, dk = w.shape
    if x.shape[-1] != d:
        raise ShapeError(f"input width {x.shape[-1]} does not match projection {w.shape}")
    lead = x.shape[:-1]
    flat = T.transpose(w, (1, 0, 2)).reshape(d, h * dk)
    out = (x.reshape(-1, d) @ flat).reshape(*lead, h, dk)
    nd = out.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(out, axes)


def project_heads(q, k, v, w_q: Sequence, w_k: Sequence, w_v: Sequence) -> list[tuple[Tensor, Tensor, Tensor]]:
    """Apply each head's projection matrices; returns one (Q_i, K_i, V_i) per head."""
    if not (len(w_q) == len(w_k) == len(w_v)):
        raise ShapeError("projection lists differ in head count")
    out = []
    for wq, wk, wv in zip(w_q, w_k, w_v):
        for x, w in ((q, wq), (k, wk), (v, wv)):
            if x.shape[-1] != w.shape[0]:
                raise ShapeError(f"cannot project width {x.shape[-1]} with matrix {w.shape}")
        out.append((q @ wq, k @ wk, v @ wv))
    return out


@dataclass
class MultiHeadOutput:
    stacked: Tensor  # [..., h, T, d_k]
    u: Tensor  # [..., T, d_model], heads concatenated
    weights: Tensor  # [..., h, T, S]

    @property
    def heads(self) -> list[Tensor]:
        """Per-head outputs ``u_i [..., T, d_k]``."""
        h = self.stacked.shape[-3]
        return [self.stacked[(Ellipsis, i, slice(None), slice(None))] for i in range(h)]

    def capsules(self) -> Tensor:
        """Per-position input capsules ``[..., T, h, d_k]``."""
        nd = self.stacked.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return T.transpose(self.stacked, axes)


def multi_head_attention(q, k, v, w_q, w_k, w_v, mask: AttentionMask | None = None) -> MultiHeadOutput:
    """Run h attention heads in parallel and concatenate their outputs.

    ``w_*`` are per-head matrices ``[d_model, d_k]``, given as a list or as a
    stacked ``[h, d_model, d_k]`` tensor.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(x) for x in (q, k, v))
    w_q, w_k, w_v = _as_stack(w_q), _as_stack(w_k), _as_stack(w_v)
    qh, kh, vh = _project(q, w_q), _project(k, w_k), _project(v, w_v)
    out, weights = scaled_dot_attention(qh, kh, vh, mask)
    result = MultiHeadOutput(stacked=out, u=None, weights=weights)
    caps = result.capsules()
    result.u = caps.reshape(*caps.shape[:-2], caps.shape[-2] * caps.shape[-1])
    return result


class MultiHeadAttention(Module):
    """Multi-head attention with output projection ``W^O``.

    When a capsule layer is attached, its output replaces the plain head
    concatenation before ``W^O``.
    """

    def __init__(self, config: MultiHeadConfig, rng: np.random.Generator, capsule=None):
        super().__init__()
        self.config = config
        d, h, dk = config.d_model, config.h, config.d_k
        self.w_q = Parameter(xavier_uniform(rng, (h, d, dk), d, d), split_axes=1)
        self.w_k = Parameter(xavier_uniform(rng, (h, d, dk), d, d), split_axes=1)
        self.w_v = Parameter(xavier_uniform(rng, (h, d, dk), d, d), split_axes=1)
        self.w_o = Parameter(xavier_uniform(rng, (d, d), d, d))
        self.b_o = Parameter(np.zeros(d))
        self.capsule = None
        if capsule is not None:
            self.capsule = capsule

    def forward(self, query, key, value, mask: AttentionMask | None = None) -> Tensor:
        mh = multi_head_attention(query, key, value, self.w_q, self.w_k, self.w_v, mask)
        merged = mh.u if self.capsule is None else self.capsule(mh.capsules())
        lead = merged.shape[:-1]
        d = merged.shape[-1]
        return (merged.reshape(-1, d) @ self.w_o + self.b_o).reshape(*lead, d)
