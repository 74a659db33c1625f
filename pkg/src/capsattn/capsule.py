"""The capsule sub-layer placed between multi-head attention and ``W^O``.

Head outputs become input capsules, are routed into ``l`` output capsules,
and the concatenated result goes through a small FFN whose output is added
back onto the concatenated heads::

    O = Concat(u_1..u_h) + FFN(Concat(v_1..v_l))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import routing
from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import FeedForward, Module, Parameter, feed_forward
from .routing import RoutingConfig, RoutingTrace
from .tensor import Tensor


@dataclass(frozen=True)
class CapsuleLayerConfig:
    routing: RoutingConfig
    ffn_hidden: int

    def __post_init__(self):
        if self.ffn_hidden < 1:
            raise ConfigError("ffn_hidden must be positive")
        if self.routing.d_out * self.routing.l != self.routing.d_model:
            raise ConfigError("output capsules must concatenate back to d_model")

    @property
    def d_model(self) -> int:
        return self.routing.d_model


@dataclass
class CapsuleLayerParams:
    transforms: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    beta_alpha: Tensor | None = None
    beta_mu: Tensor | None = None


def param_count(config: CapsuleLayerConfig) -> int:
    """Learnable scalars added by one capsule layer."""
    h, l, a, b = config.routing.transform_shape()
    d, f = config.d_model, config.ffn_hidden
    count = h * l * a * b + d * f + f + f * d + d
    if config.routing.kind == "em":
        count += 2 * config.routing.l
    return count


def _stack_heads(u_heads) -> Tensor:
    if isinstance(u_heads, Tensor):
        return u_heads
    heads = list(u_heads)
    widths = {x.shape[-1] for x in heads}
    if len(widths) != 1:
        raise ShapeError(f"head outputs have differing widths {sorted(widths)}")
    return T.stack(heads, axis=-2)


def capsule_layer_forward(u_heads, params: CapsuleLayerParams, config: CapsuleLayerConfig, fused: bool = True):
    """Route head outputs and return ``(O [..., d_model], trace)``.

    ``u_heads`` is either a list of ``h`` tensors ``[..., d/h]`` or one tensor
    ``[..., h, d/h]``.
    """
    rc = config.routing
    u = _stack_heads(u_heads)
    if u.shape[-2] != rc.h or u.shape[-1] != rc.d_in:
        raise ShapeError(f"expected {rc.h} heads of width {rc.d_in}, got {u.shape[-2:]}")
    if tuple(params.transforms.shape) != rc.transform_shape():
        raise ConfigError(f"transforms {params.transforms.shape} do not match {rc.transform_shape()}")
    lead = u.shape[:-2]
    votes = routing.compute_votes(u, params.transforms, pose=rc.pose_mode)
    if rc.kind == "dynamic":
        v, trace = routing.dynamic_route(votes, rc.iterations, fused=fused)
    else:
        if params.beta_alpha is None or params.beta_mu is None:
            raise ConfigError("EM routing needs beta_alpha and beta_mu")
        v, trace = routing.em_route(votes, params.beta_alpha, params.beta_mu, rc.iterations, rc.em, fused=fused)
    concat_u = u.reshape(*lead, rc.d_model)
    concat_v = v.reshape(*lead, rc.d_model)
    out = concat_u + feed_forward(concat_v, params.w1, params.b1, params.w2, params.b2)
    return out, trace


class CapsuleLayer(Module):
    def __init__(self, config: CapsuleLayerConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.w_vote = Parameter(routing.init_transforms(config.routing, rng), split_axes=2)
        self.ffn = FeedForward(config.d_model, config.ffn_hidden, rng)
        if config.routing.kind == "em":
            init = config.routing.em.beta_init
            self.beta_alpha = Parameter(np.full(config.routing.l, init))
            self.beta_mu = Parameter(np.full(config.routing.l, init))
        self.fused = True
        self.capture = False
        self.last_trace: RoutingTrace | None = None

    def params(self) -> CapsuleLayerParams:
        return CapsuleLayerParams(
            self.w_vote,
            self.ffn.w1,
            self.ffn.b1,
            self.ffn.w2,
            self.ffn.b2,
            getattr(self, "beta_alpha", None),
            getattr(self, "beta_mu", None),
        )

    def forward(self, u_heads) -> Tensor:
        out, trace = capsule_layer_forward(u_heads, self.params(), self.config, fused=self.fused)
        if self.capture:
            self.last_trace = trace
        return out
