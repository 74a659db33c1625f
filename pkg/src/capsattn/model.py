"""A small post-norm encoder-decoder transformer with optional capsule layers.

Capsule layers can be attached after the multi-head attention of any
sub-layer: encoder self-attention (``enc``), decoder self-attention (``dec``)
or encoder-decoder attention (``ed``), at any layer index ``1..depth``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .attention import AttentionMask, MultiHeadAttention, MultiHeadConfig
from .capsule import CapsuleLayer, CapsuleLayerConfig, param_count
from .errors import ConfigError
from .nn import FeedForward, LayerNorm, Module, ModuleList, Parameter, xavier_uniform
from .routing import EmHyper, RoutingConfig
from .tensor import Tensor

PAD, BOS, EOS = 0, 1, 2
SITE_KINDS = ("enc", "dec", "ed")
_SITE_RE = re.compile(r"^(enc|dec|ed)_?(\d+)$")


def site_module_name(kind: str, layer: int) -> str:
    """Parameter-name prefix of the attention block at a placement site."""
    if kind == "enc":
        return f"enc.{layer}.self_attn"
    if kind == "dec":
        return f"dec.{layer}.self_attn"
    return f"dec.{layer}.cross_attn"


@dataclass(frozen=True)
class PlacementMap:
    sites: frozenset = frozenset()

    @classmethod
    def parse(cls, text: str | None) -> "PlacementMap":
        """Parse ``"ed2,dec2"`` (case-insensitive; ``""``/``none`` is empty)."""
        if text is None:
            return cls()
        text = text.strip().lower()
        if text in ("", "none", "-"):
            return cls()
        seen = []
        for token in text.replace(" ", "").split(","):
            m = _SITE_RE.match(token)
            if not m:
                raise ConfigError(f"bad placement site {token!r}; expected e.g. enc1, dec2, ed2")
            site = (m.group(1), int(m.group(2)))
            if site in seen:
                raise ConfigError(f"duplicate placement site {token!r}")
            seen.append(site)
        return cls(frozenset(seen))

    def validate(self, depth: int) -> None:
        bad = [f"{k}{i}" for k, i in sorted(self.sites) if not 1 <= i <= depth]
        if bad:
            raise ConfigError(f"placement sites outside depth {depth}: {', '.join(bad)}")

    def ordered(self) -> list[tuple[str, int]]:
        return sorted(self.sites, key=lambda s: (SITE_KINDS.index(s[0]), s[1]))

    def __str__(self) -> str:
        return ",".join(f"{k}{i}" for k, i in self.ordered()) or "none"

    def __len__(self) -> int:
        return len(self.sites)

    def __contains__(self, site) -> bool:
        return site in self.sites


# Placement variants for the insertion sweep, written for a
# 6-layer model.
PLACEMENT_VARIANTS = (
    "enc1",
    "enc1,enc2",
    "enc5,enc6",
    "ed1",
    "ed6",
    "ed5,ed6",
    "dec1",
    "dec6",
    "dec5,dec6",
    "ed6,dec6",
    "ed5,ed6,dec5,dec6",
)


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int = 20
    tgt_vocab: int = 20
    d_model: int = 64
    heads: int = 4
    depth: int = 2
    d_ff: int = 128
    capsules: int = 4
    routing: str = "em"
    iterations: int = 3
    placement: PlacementMap = field(default_factory=lambda: PlacementMap.parse("ed2,dec2"))
    max_len: int = 64
    capsule_ffn: int = 0  # 0 -> same as d_ff
    lambda_schedule: tuple = ()

    def __post_init__(self):
        if isinstance(self.placement, str):
            object.__setattr__(self, "placement", PlacementMap.parse(self.placement))
        if self.routing not in ("none", "dynamic", "em"):
            raise ConfigError(f"unknown routing {self.routing!r}")
        if min(self.src_vocab, self.tgt_vocab) < 3:
            raise ConfigError("vocabularies need room for pad/begin/end symbols")
        MultiHeadConfig(self.d_model, self.heads)
        if self.routing != "none" and self.d_model % self.capsules:
            raise ConfigError(f"d_model={self.d_model} not divisible by capsules={self.capsules}")
        self.placement.validate(self.depth)

    @property
    def active_placement(self) -> PlacementMap:
        return PlacementMap() if self.routing == "none" else self.placement

    def capsule_config(self) -> CapsuleLayerConfig:
        em = EmHyper(lambda_schedule=tuple(self.lambda_schedule) or None)
        rc = RoutingConfig(self.routing, self.heads, self.capsules, self.d_model, self.iterations, em)
        return CapsuleLayerConfig(rc, self.capsule_ffn or self.d_ff)

    # -- key=value persistence ---------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "lambda_schedule":
                value = " ".join(repr(float(x)) for x in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                continue
            value = value.strip()
            if key == "placement":
                kw[key] = PlacementMap.parse(value)
            elif key == "routing":
                kw[key] = value
            elif key == "lambda_schedule":
                kw[key] = tuple(float(x) for x in value.split())
            else:
                kw[key] = int(value)
        return cls(**kw)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def sinusoidal_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class EncoderLayer(Module):
    def __init__(self, mh: MultiHeadConfig, d_ff: int, rng, capsule=None):
        super().__init__()
        self.self_attn = MultiHeadAttention(mh, rng, capsule)
        self.norm1 = LayerNorm(mh.d_model)
        self.ffn = FeedForward(mh.d_model, d_ff, rng)
        self.norm2 = LayerNorm(mh.d_model)

    def forward(self, x, mask):
        x = self.norm1(x + self.self_attn(x, x, x, mask))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(Module):
    def __init__(self, mh: MultiHeadConfig, d_ff: int, rng, self_capsule=None, cross_capsule=None):
        super().__init__()
        self.self_attn = MultiHeadAttention(mh, rng, self_capsule)
        self.norm1 = LayerNorm(mh.d_model)
        self.cross_attn = MultiHeadAttention(mh, rng, cross_capsule)
        self.norm2 = LayerNorm(mh.d_model)
        self.ffn = FeedForward(mh.d_model, d_ff, rng)
        self.norm3 = LayerNorm(mh.d_model)

    def forward(self, x, memory, self_mask, cross_mask):
        x = self.norm1(x + self.self_attn(x, x, x, self_mask))
        x = self.norm2(x + self.cross_attn(x, memory, memory, cross_mask))
        return self.norm3(x + self.ffn(x))


class Transformer(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        mh = MultiHeadConfig(config.d_model, config.heads)
        placement = config.active_placement
        caps_cfg = config.capsule_config() if len(placement) else None

        def capsule_for(kind, layer):
            if (kind, layer) not in placement:
                return None
            # a separate stream per site keeps the stock parameters identical
            # whatever the placement
            site_rng = np.random.default_rng([seed, SITE_KINDS.index(kind) + 1, layer])
            return CapsuleLayer(caps_cfg, site_rng)

        d = config.d_model
        self.src_embed = Parameter(rng.normal(0.0, d**-0.5, size=(config.src_vocab, d)))
        self.tgt_embed = Parameter(rng.normal(0.0, d**-0.5, size=(config.tgt_vocab, d)))
        self.enc = ModuleList(
            [EncoderLayer(mh, config.d_ff, rng, capsule_for("enc", i)) for i in range(1, config.depth + 1)]
        )
        self.dec = ModuleList(
            [
                DecoderLayer(mh, config.d_ff, rng, capsule_for("dec", i), capsule_for("ed", i))
                for i in range(1, config.depth + 1)
            ]
        )
        self.out_w = Parameter(xavier_uniform(rng, (d, config.tgt_vocab), d, config.tgt_vocab))
        self.out_b = Parameter(np.zeros(config.tgt_vocab))
        self.pos_table = sinusoidal_table(config.max_len, d)

    # -- capsule sites -----------------------------------------------------
    def capsule_sites(self) -> dict[str, CapsuleLayer]:
        sites = {}
        for kind, layer in self.config.active_placement.ordered():
            block = self.enc[layer].self_attn if kind == "enc" else (
                self.dec[layer].self_attn if kind == "dec" else self.dec[layer].cross_attn
            )
            sites[f"{kind}{layer}"] = block.capsule
        return sites

    def set_fused(self, flag: bool) -> None:
        for layer in self.capsule_sites().values():
            layer.fused = flag

    # -- forward -------------------------------------------------------------
    def _embed(self, table: Parameter, ids: np.ndarray) -> Tensor:
        n = ids.shape[1]
        if n > self.config.max_len:
            raise ConfigError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = T.embedding(table, ids) * math.sqrt(self.config.d_model)
        return x + self.pos_table[:n].astype(x.dtype)

    def encode(self, src: np.ndarray):
        src = _check_ids(src, self.config.src_vocab, "source")
        keep = src != PAD
        mask = AttentionMask.padding(keep, src.shape[1])
        x = self._embed(self.src_embed, src)
        for layer in self.enc:
            x = layer(x, mask)
        return x, keep

    def decode(self, dec_in: np.ndarray, memory: Tensor, src_keep: np.ndarray) -> Tensor:
        dec_in = _check_ids(dec_in, self.config.tgt_vocab, "target")
        n = dec_in.shape[1]
        self_mask = AttentionMask.causal(n) & AttentionMask.padding(dec_in != PAD, n)
        cross_mask = AttentionMask.padding(src_keep, n)
        x = self._embed(self.tgt_embed, dec_in)
        for layer in self.dec:
            x = layer(x, memory, self_mask, cross_mask)
        b, _, d = x.shape
        return (x.reshape(-1, d) @ self.out_w + self.out_b).reshape(b, n, self.config.tgt_vocab)

    def forward(self, src: np.ndarray, tgt: np.ndarray) -> Tensor:
        memory, keep = self.encode(src)
        return self.decode(shift_right(tgt), memory, keep)


def _check_ids(ids, vocab: int, what: str) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if not np.issubdtype(ids.dtype, np.integer):
        raise ConfigError(f"{what} tokens must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ConfigError(f"{what} token id outside vocabulary of size {vocab}")
    return ids


def shift_right(tgt: np.ndarray) -> np.ndarray:
    """Decoder input: begin symbol followed by the target minus its last slot."""
    tgt = np.asarray(tgt)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    out = np.empty_like(tgt)
    out[:, 0] = BOS
    out[:, 1:] = tgt[:, :-1]
    return out


def build_model(config: ModelConfig, seed: int = 0) -> Transformer:
    return Transformer(config, seed)


def stock_param_count(config: ModelConfig) -> int:
    return Transformer(config.with_(routing="none"), 0).num_parameters()


def expected_param_count(config: ModelConfig) -> int:
    placement = config.active_placement
    extra = len(placement) * param_count(config.capsule_config()) if len(placement) else 0
    return stock_param_count(config) + extra


def forward_loss(model: Transformer, src, tgt, smoothing: float = 0.0):
    """Mean cross-entropy over non-pad target positions; returns ``(loss, logits)``."""
    tgt = _check_ids(tgt, model.config.tgt_vocab, "target")
    logits = model(src, tgt)
    loss = T.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=PAD, smoothing=smoothing)
    return loss, logits


def greedy_decode(model: Transformer, src, max_len: int) -> list[list[int]]:
    """Append the arg-max token (lowest id on ties) until the end symbol or
    ``max_len`` tokens. Returned sequences exclude the end symbol."""
    src = _check_ids(src, model.config.src_vocab, "source")
    batch = src.shape[0]
    max_len = min(max_len, model.config.max_len)
    with T.no_grad():
        memory, keep = model.encode(src)
        prefix = np.full((batch, 1), BOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        outputs: list[list[int]] = [[] for _ in range(batch)]
        for _ in range(max_len):
            logits = model.decode(prefix, memory, keep).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            for b in range(batch):
                if done[b]:
                    continue
                if nxt[b] == EOS:
                    done[b] = True
                else:
                    outputs[b].append(int(nxt[b]))
            if done.all():
                break
            prefix = np.concatenate([prefix, np.where(done, PAD, nxt)[:, None]], axis=1)
    return outputs
