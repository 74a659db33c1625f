"""Finite-difference gradient checks in 64-bit precision.

Each scope builds a scalar loss from random inputs, runs one backward pass,
then compares every (or a sampled subset of) input coordinate against the
central difference ``(f(x+eps) - f(x-eps)) / 2eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import routing
from . import tensor as T
from .capsule import CapsuleLayer, CapsuleLayerConfig
from .errors import ConfigError
from .model import ModelConfig, build_model, forward_loss
from .routing import RoutingConfig
from .tensor import Tensor

EPS = 1e-5
TOLERANCE = 1e-4
# below this magnitude errors are judged in absolute terms
REL_FLOOR = 1e-6


@dataclass
class BlockResult:
    name: str
    max_rel: float
    max_abs: float
    checked: int


@dataclass
class GradReport:
    scope: str
    seed: int
    blocks: list[BlockResult] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max((b.max_rel for b in self.blocks), default=0.0)

    def ok(self, tol: float = TOLERANCE) -> bool:
        return all(b.max_rel < tol for b in self.blocks)

    def format(self, tol: float = TOLERANCE) -> str:
        width = max((len(b.name) for b in self.blocks), default=5)
        lines = [f"scope={self.scope} seed={self.seed}"]
        for b in self.blocks:
            flag = "ok" if b.max_rel < tol else "FAIL"
            lines.append(f"  {b.name:<{width}}  rel={b.max_rel:.3e}  abs={b.max_abs:.3e}  n={b.checked}  {flag}")
        lines.append(f"max relative error {self.max_rel:.3e} ({'pass' if self.ok(tol) else 'fail'} at {tol:g})")
        return "\n".join(lines)


def check(
    loss_fn: Callable[[], Tensor],
    leaves: list[tuple[str, Tensor]],
    eps: float = EPS,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[BlockResult]:
    """Compare analytic and numeric gradients of ``loss_fn`` w.r.t. ``leaves``.

    ``loss_fn`` returns a scalar tensor, or ``(y, w)`` for the loss
    ``sum(y * w)``. The second form differences ``y`` elementwise before
    reducing, which keeps terms that do not move with the perturbed
    coordinate (residual paths, say) out of the cancellation.
    """
    for _, leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise ConfigError("gradient checks need 64-bit leaves")
        leaf.requires_grad = True
        leaf.grad = None
    out = loss_fn()
    (out if not isinstance(out, tuple) else (out[0] * out[1]).sum()).backward()
    analytic = {name: np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for name, leaf in leaves}
    rng = rng or np.random.default_rng(0)

    results = []
    with T.no_grad():
        for name, leaf in leaves:
            flat = leaf.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a = analytic[name].reshape(-1)
            worst_rel = worst_abs = 0.0
            for k in idx:
                orig = flat[k]
                flat[k] = orig + eps
                up = loss_fn()
                flat[k] = orig - eps
                down = loss_fn()
                flat[k] = orig
                if isinstance(up, tuple):
                    num = math.fsum(((up[0].data - down[0].data) * up[1]).ravel()) / (2 * eps)
                else:
                    num = (up.item() - down.item()) / (2 * eps)
                err = abs(num - a[k])
                worst_abs = max(worst_abs, err)
                worst_rel = max(worst_rel, err / max(abs(num), abs(a[k]), REL_FLOOR))
            results.append(BlockResult(name, worst_rel, worst_abs, len(idx)))
    return results


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _op_scope(name, rng):
    if name == "squash":
        s, r = _leaf(rng, 3, 4, 5), rng.standard_normal((3, 4, 5))
        return lambda: (routing.squash(s), r), [("s", s)]
    if name in ("softmax", "log_softmax"):
        x, r = _leaf(rng, 3, 6), rng.standard_normal((3, 6))
        op = T.softmax if name == "softmax" else T.log_softmax
        return lambda: (op(x, -1), r), [("x", x)]
    if name == "matmul":
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
        r = rng.standard_normal((2, 3, 5))
        return lambda: (T.matmul(a, b), r), [("a", a), ("b", b)]
    if name == "layer_norm":
        x, g, b = _leaf(rng, 4, 8), _leaf(rng, 8), _leaf(rng, 8)
        r = rng.standard_normal((4, 8))
        return lambda: (T.layer_norm(x, g, b), r), [("x", x), ("gain", g), ("bias", b)]
    if name == "cross_entropy":
        x = _leaf(rng, 6, 5)
        t = rng.integers(0, 5, size=6)
        t[0] = 0
        return lambda: T.cross_entropy(x, t, ignore_index=0, smoothing=0.1), [("logits", x)]
    return None


def _routing_scope(name, rng):
    if name == "dynamic_route":
        votes = _leaf(rng, 3, 4, 4, 6, scale=0.5)
        r = rng.standard_normal((3, 4, 6))
        return lambda: (routing.dynamic_route(votes, 3)[0], r), [("votes", votes)]
    if name == "em_route":
        votes = _leaf(rng, 3, 4, 4, 6, scale=0.5)
        ba, bm = _leaf(rng, 4, scale=0.5), _leaf(rng, 4, scale=0.5)
        r = rng.standard_normal((3, 4, 6))

        def loss():
            return routing.em_route(votes, ba, bm, 3)[0], r

        return loss, [("votes", votes), ("beta_alpha", ba), ("beta_mu", bm)]
    return None


def _capsule_scope(kind: str, rng):
    h, l, d = 4, 4, 16
    cfg = CapsuleLayerConfig(RoutingConfig(kind, h, l, d, 3), ffn_hidden=12)
    layer = CapsuleLayer(cfg, rng)
    if kind == "em":
        layer.beta_alpha.data[...] = rng.standard_normal(l) * 0.5
        layer.beta_mu.data[...] = rng.standard_normal(l) * 0.5
    u = _leaf(rng, 2, 3, h, d // h)
    r = rng.standard_normal((2, 3, d))
    leaves = [("u", u)] + list(layer.named_parameters())
    return lambda: (layer(u), r), leaves


def full_model_check(config: ModelConfig, seed: int, max_coords: int = 6, batch: int = 2, length: int = 5):
    rng = np.random.default_rng([seed, 7])
    with T.precision(np.float64):
        model = build_model(config, seed)
        src = rng.integers(3, config.src_vocab, size=(batch, length))
        tgt = rng.integers(3, config.tgt_vocab, size=(batch, length))
        src[0, -1] = 0  # exercise padding masks
        tgt[1, -1] = 0
        return check(lambda: forward_loss(model, src, tgt)[0], list(model.named_parameters()), max_coords=max_coords, rng=rng)


TOY_FULL = ModelConfig(src_vocab=11, tgt_vocab=11, d_model=16, heads=4, depth=2, d_ff=24, capsules=4, max_len=16)

OP_SCOPES = ("squash", "softmax", "log_softmax", "matmul", "layer_norm", "cross_entropy")
SCOPES = OP_SCOPES + ("dynamic_route", "em_route", "capsule_dynamic", "capsule_em", "full")


def grad_check(scope: str, seed: int = 1, routing_kind: str = "em", placement: str = "ed2,dec2",
               config: ModelConfig | None = None, max_coords: int = 6) -> GradReport:
    """Run one named check and return per-block maximum relative errors.

    ``scope`` is an op name, ``dynamic_route``/``em_route``, a capsule layer
    (``capsule_dynamic``/``capsule_em``) or ``full`` for the toy model.
    """
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope {scope!r}; choose from {', '.join(SCOPES)}")
    report = GradReport(scope, seed)
    with T.precision(np.float64):
        rng = np.random.default_rng(seed)
        if scope == "full":
            cfg = config or TOY_FULL.with_(routing=routing_kind, placement=placement)
            report.blocks = full_model_check(cfg, seed, max_coords=max_coords)
            return report
        if scope.startswith("capsule_"):
            loss, leaves = _capsule_scope(scope.split("_", 1)[1], rng)
        else:
            made = _op_scope(scope, rng) or _routing_scope(scope, rng)
            loss, leaves = made
        report.blocks = check(loss, leaves, rng=rng)
    return report
