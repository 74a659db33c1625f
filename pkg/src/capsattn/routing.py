"""Votes and the two routing procedures that merge h input capsules into l
output capsules.

Every token position is routed independently. Votes are arranged as
``[..., h, l, d_out]``: for each leading position, input capsule ``i`` and
output capsule ``j`` hold the prediction ``u_i W_ij``.

Two code paths compute the same thing:

* the *fused* path runs the whole iteration loop inside one autodiff node
  backed by :mod:`capsattn.kernels` (compiled or numpy), with a hand-written
  backward;
* the *composed* path (``fused=False``) builds the loop out of ordinary
  tensor operations so that autodiff unrolls it.

Tests check the two against each other, against finite differences, and
against straight-line references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError
from .tensor import Function, Tensor

LOG_2PI = math.log(2.0 * math.pi)
GAUSS_CONST = 0.5 * (1.0 + LOG_2PI)
SQUASH_EPS = 1e-12
MASS_FLOOR = 1e-12


def default_lambda_schedule(iterations: int) -> tuple[float, ...]:
    return tuple(0.01 * (t + 1) for t in range(iterations))


def default_variance_floor(dtype) -> float:
    return 1e-8 if np.dtype(dtype) == np.float64 else 1e-4


@dataclass(frozen=True)
class EmHyper:
    """Fixed EM hyper-parameters. ``beta_alpha``/``beta_mu`` are learned and
    live with the layer parameters; this only carries their initial value."""

    lambda_schedule: tuple[float, ...] | None = None
    variance_floor: float | None = None
    beta_init: float = 0.0

    def schedule(self, iterations: int) -> tuple[float, ...]:
        sched = self.lambda_schedule or default_lambda_schedule(iterations)
        if len(sched) != iterations:
            raise ConfigError(f"lambda schedule has {len(sched)} entries for {iterations} iterations")
        if any(lam <= 0 for lam in sched):
            raise ConfigError("lambda schedule entries must be positive")
        return tuple(float(x) for x in sched)

    def floor(self, dtype) -> float:
        floor = self.variance_floor if self.variance_floor is not None else default_variance_floor(dtype)
        if floor <= 0:
            raise ConfigError("variance_floor must be positive")
        return float(floor)


@dataclass(frozen=True)
class RoutingConfig:
    kind: Literal["dynamic", "em"]
    h: int
    l: int
    d_model: int
    iterations: int = 3
    em: EmHyper = field(default_factory=EmHyper)

    def __post_init__(self):
        if self.kind not in ("dynamic", "em"):
            raise ConfigError(f"unknown routing kind {self.kind!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.h < 1 or self.l < 1:
            raise ConfigError("capsule counts must be positive")
        if self.d_model % self.h or self.d_model % self.l:
            raise ConfigError(f"d_model={self.d_model} must be divisible by h={self.h} and l={self.l}")
        if self.kind == "em":
            self.em.schedule(self.iterations)

    @property
    def d_in(self) -> int:
        return self.d_model // self.h

    @property
    def d_out(self) -> int:
        return self.d_model // self.l

    @property
    def pose_mode(self) -> bool:
        """EM capsules are square pose matrices when the widths allow it."""
        return self.kind == "em" and self.l == self.h and _is_square(self.d_in)

    def transform_shape(self) -> tuple[int, int, int, int]:
        if self.pose_mode:
            n = math.isqrt(self.d_in)
            return (self.h, self.l, n, n)
        return (self.h, self.l, self.d_in, self.d_out)


def _is_square(n: int) -> bool:
    r = math.isqrt(n)
    return r * r == n


@dataclass
class VoteSet:
    votes: Tensor
    transforms: Tensor
    pose: bool = False


@dataclass
class RoutingTrace:
    """Per-iteration routing state as plain arrays.

    ``c[t]`` has shape ``[..., h, l]`` and ``v[t]`` ``[..., l, d_out]``.
    EM traces also carry ``sigma2[t]`` (``[..., l, d_out]``) and
    ``alpha[t]`` (``[..., l]``).
    """

    kind: str
    c: list[np.ndarray]
    v: list[np.ndarray]
    sigma2: list[np.ndarray] | None = None
    alpha: list[np.ndarray] | None = None

    @property
    def iterations(self) -> int:
        return len(self.c)

    def max_row_error(self) -> float:
        """Largest deviation of any assignment row sum from 1."""
        return max(float(np.abs(c.sum(-1) - 1.0).max()) for c in self.c)

    def records(self):
        """Yield one dict per (position, iteration), positions flattened."""
        lead = self.c[0].shape[:-2]
        n_pos = int(np.prod(lead)) if lead else 1

        def rows(arrs):
            return None if arrs is None else [a.reshape(n_pos, -1) for a in arrs]

        c, v, sig, alpha = rows(self.c), rows(self.v), rows(self.sigma2), rows(self.alpha)
        for p in range(n_pos):
            for t in range(self.iterations):
                rec = {"position": p, "iteration": t, "c": c[t][p].tolist(), "v": v[t][p].tolist()}
                if sig is not None:
                    rec["sigma2"] = sig[t][p].tolist()
                    rec["alpha"] = alpha[t][p].tolist()
                yield rec


# ---------------------------------------------------------------------------
# votes
# ---------------------------------------------------------------------------


def init_transforms(config: RoutingConfig, rng: np.random.Generator, dtype=None) -> np.ndarray:
    """Uniform fan-in initialisation of the vote transforms."""
    shape = config.transform_shape()
    bound = 1.0 / math.sqrt(shape[2])
    return rng.uniform(-bound, bound, size=shape).astype(dtype or T.get_default_dtype())


def compute_votes(u: Tensor, transforms: Tensor, pose: bool = False) -> VoteSet:
    """Map input capsules ``u [..., h, d_in]`` to votes ``[..., h, l, d_out]``.

    Vector mode uses ``transforms [h, l, d_in, d_out]`` and votes ``u_i W_ij``.
    Pose mode uses ``transforms [h, l, n, n]``; each ``u_i`` is read as an
    ``n x n`` matrix ``M_i`` and the vote is ``M_i W_ij`` flattened.
    """
    u = u if isinstance(u, Tensor) else Tensor(u)
    transforms = transforms if isinstance(transforms, Tensor) else Tensor(transforms)
    h, l, a, b = transforms.shape
    lead = u.shape[:-2]
    if u.shape[-2] != h:
        raise ConfigError(f"{u.shape[-2]} input capsules but transforms expect {h}")
    n_pos = int(np.prod(lead)) if lead else 1
    d_in = u.shape[-1]
    if pose:
        n = math.isqrt(d_in)
        if n * n != d_in or a != n or b != n:
            raise ConfigError(
                f"pose mode needs square capsule widths; got d_in={d_in}, transforms {transforms.shape}"
            )
        # rows of every M_i stacked over positions: [h, P*n, n] @ [h, n, l*n]
        m = T.transpose(u.reshape(n_pos, h, n, n), (1, 0, 2, 3)).reshape(h, n_pos * n, n)
        w = T.transpose(transforms, (0, 2, 1, 3)).reshape(h, n, l * n)
        out = (m @ w).reshape(h, n_pos, n, l, n)
        votes = T.transpose(out, (1, 0, 3, 2, 4)).reshape(*lead, h, l, n * n)
    else:
        if a != d_in:
            raise ConfigError(f"transform input width {a} != capsule width {d_in}")
        x = T.transpose(u.reshape(n_pos, h, d_in), (1, 0, 2))
        w = T.transpose(transforms, (0, 2, 1, 3)).reshape(h, d_in, l * b)
        out = (x @ w).reshape(h, n_pos, l, b)
        votes = T.transpose(out, (1, 0, 2, 3)).reshape(*lead, h, l, b)
    return VoteSet(votes=votes, transforms=transforms, pose=pose)


# ---------------------------------------------------------------------------
# composed (autodiff-unrolled) routing
# ---------------------------------------------------------------------------


def squash(s, eps: float = SQUASH_EPS) -> Tensor:
    """Shrink each vector along the last axis to norm r^2/(1+r^2)."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    n2 = (s * s).sum(axis=-1, keepdims=True)
    return s * (n2 / ((1.0 + n2) * T.sqrt(n2 + eps)))


def _votes_tensor(votes) -> Tensor:
    if isinstance(votes, VoteSet):
        votes = votes.votes
    return votes if isinstance(votes, Tensor) else Tensor(votes)


def _dynamic_composed(votes: Tensor, iterations: int):
    *lead, h, l, d = votes.shape
    b = Tensor(np.zeros((*lead, h, l), dtype=votes.dtype))
    cs, vs = [], []
    v = None
    for t in range(iterations):
        c = T.softmax(b, axis=-1)
        s = (c.reshape(*lead, h, l, 1) * votes).sum(axis=-3)
        v = squash(s)
        cs.append(c.data.copy())
        vs.append(v.data.copy())
        if t < iterations - 1:
            b = b + (votes * v.reshape(*lead, 1, l, d)).sum(axis=-1)
    return v, RoutingTrace("dynamic", cs, vs)


def em_m_step(votes, c, beta_alpha, beta_mu, lam: float, variance_floor: float):
    """Fit one Gaussian per output capsule given assignments ``c [..., h, l]``.

    Returns ``(mu, sigma2, alpha)`` with shapes ``[..., l, d]``,
    ``[..., l, d]`` and ``[..., l]``.
    """
    votes = _votes_tensor(votes)
    c = c if isinstance(c, Tensor) else Tensor(c, dtype=votes.dtype)
    *lead, h, l, d = votes.shape
    c4 = c.reshape(*lead, h, l, 1)
    mass = c.sum(axis=-2)
    safe = T.clamp_min(mass, MASS_FLOOR).reshape(*lead, l, 1)
    mu = (c4 * votes).sum(axis=-3) / safe
    diff = votes - mu.reshape(*lead, 1, l, d)
    var = (c4 * T.square(diff)).sum(axis=-3) / safe
    sigma2 = T.clamp_min(var, variance_floor)
    cost = (0.5 * T.log(sigma2) + GAUSS_CONST) * mass.reshape(*lead, l, 1)
    alpha = T.sigmoid(lam * (beta_alpha - beta_mu * mass - cost.sum(axis=-1)))
    return mu, sigma2, alpha


def em_e_step(votes, mu, sigma2, alpha) -> Tensor:
    """Reassign every vote to output capsules by activation-weighted Gaussian
    likelihood, normalised in log space. Returns ``c [..., h, l]``."""
    votes = _votes_tensor(votes)
    *lead, h, l, d = votes.shape
    mu4 = mu.reshape(*lead, 1, l, d)
    sig4 = sigma2.reshape(*lead, 1, l, d)
    diff = votes - mu4
    log_p = (-0.5 * (LOG_2PI + T.log(sig4)) - T.square(diff) / (2.0 * sig4)).sum(axis=-1)
    tiny = float(np.finfo(votes.dtype).tiny)
    log_alpha = T.log(T.clamp_min(alpha, tiny)).reshape(*lead, 1, l)
    return T.softmax(log_alpha + log_p, axis=-1)


def _em_composed(votes: Tensor, beta_alpha, beta_mu, schedule, floor):
    *lead, h, l, d = votes.shape
    c = Tensor(np.full((*lead, h, l), 1.0 / l, dtype=votes.dtype))
    trace = RoutingTrace("em", [], [], [], [])
    mu = None
    for t, lam in enumerate(schedule):
        mu, sigma2, alpha = em_m_step(votes, c, beta_alpha, beta_mu, lam, floor)
        trace.c.append(c.data.copy())
        trace.v.append(mu.data.copy())
        trace.sigma2.append(sigma2.data.copy())
        trace.alpha.append(alpha.data.copy())
        if t < len(schedule) - 1:
            c = em_e_step(votes, mu, sigma2, alpha)
    return mu, trace


# ---------------------------------------------------------------------------
# fused routing nodes
# ---------------------------------------------------------------------------


class DynamicRouting(Function):
    def forward(self, votes, iterations=3, backend=None):
        *lead, h, l, d = votes.shape
        self.dtype = votes.dtype
        self.lead = tuple(lead)
        self.k = kernels.get(backend)
        u = np.ascontiguousarray(votes.reshape(-1, h, l, d), dtype=np.float64)
        v, c_all, s_all, v_all = self.k.dynamic_forward(u, iterations, SQUASH_EPS)
        self.saved = (u, c_all, s_all, v_all)
        self.trace = RoutingTrace(
            "dynamic",
            [c.reshape(*lead, h, l) for c in c_all],
            [x.reshape(*lead, l, d) for x in v_all],
        )
        return v.reshape(*lead, l, d).astype(self.dtype, copy=False)

    def backward(self, g):
        u, c_all, s_all, v_all = self.saved
        gv = np.ascontiguousarray(g.reshape(u.shape[0], *g.shape[-2:]), dtype=np.float64)
        gu = self.k.dynamic_backward(u, c_all, s_all, v_all, gv, SQUASH_EPS)
        return gu.reshape(*self.lead, *u.shape[1:]).astype(self.dtype, copy=False)


class EMRouting(Function):
    def forward(self, votes, beta_alpha, beta_mu, schedule=(), floor=1e-8, backend=None):
        *lead, h, l, d = votes.shape
        self.dtype = votes.dtype
        self.lead = tuple(lead)
        self.k = kernels.get(backend)
        self.args = (
            np.ascontiguousarray(votes.reshape(-1, h, l, d), dtype=np.float64),
            np.array(np.broadcast_to(beta_alpha, (l,)), dtype=np.float64),
            np.array(np.broadcast_to(beta_mu, (l,)), dtype=np.float64),
            np.asarray(schedule, dtype=np.float64),
            float(floor),
        )
        saved = self.k.em_forward(*self.args, MASS_FLOOR)
        self.saved = saved
        mu_all, _, sig_all, alpha_all, c_all, _ = saved
        self.trace = RoutingTrace(
            "em",
            [c.reshape(*lead, h, l) for c in c_all],
            [m.reshape(*lead, l, d) for m in mu_all],
            [s.reshape(*lead, l, d) for s in sig_all],
            [a.reshape(*lead, l) for a in alpha_all],
        )
        self.beta_shapes = (beta_alpha.shape, beta_mu.shape)
        return mu_all[-1].reshape(*lead, l, d).astype(self.dtype, copy=False)

    def backward(self, g):
        u = self.args[0]
        gmu = np.ascontiguousarray(g.reshape(u.shape[0], *g.shape[-2:]), dtype=np.float64)
        gu, gba, gbm = self.k.em_backward(*self.args, MASS_FLOOR, self.saved, gmu)
        ba_shape, bm_shape = self.beta_shapes
        return (
            gu.reshape(*self.lead, *u.shape[1:]).astype(self.dtype, copy=False),
            _reduce_to(gba, ba_shape).astype(self.dtype, copy=False),
            _reduce_to(gbm, bm_shape).astype(self.dtype, copy=False),
        )


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _run_fused(fn_cls, inputs, kwargs):
    out, fn = fn_cls.apply_with_node(*inputs, **kwargs)
    return out, fn.trace


# ---------------------------------------------------------------------------
# public routing entry points
# ---------------------------------------------------------------------------


def dynamic_route(votes, iterations: int = 3, fused: bool = True, backend: str | None = None):
    """Routing-by-agreement with logits reset to zero on every call.

    Returns ``(v [..., l, d], trace)``.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    votes = _votes_tensor(votes)
    if not fused:
        return _dynamic_composed(votes, iterations)
    return _run_fused(DynamicRouting, (votes,), {"iterations": iterations, "backend": backend})


def em_route(
    votes,
    beta_alpha=None,
    beta_mu=None,
    iterations: int = 3,
    hyper: EmHyper | None = None,
    fused: bool = True,
    backend: str | None = None,
):
    """EM routing from uniform assignments, ending on an M-step.

    The output capsules are the Gaussian means; activations are computed
    (the E-step needs them) and kept only in the trace.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    votes = _votes_tensor(votes)
    hyper = hyper or EmHyper()
    l = votes.shape[-2]
    if beta_alpha is None:
        beta_alpha = Tensor(np.full(l, hyper.beta_init, dtype=votes.dtype))
    if beta_mu is None:
        beta_mu = Tensor(np.full(l, hyper.beta_init, dtype=votes.dtype))
    schedule = hyper.schedule(iterations)
    floor = hyper.floor(votes.dtype)
    if not fused:
        return _em_composed(votes, beta_alpha, beta_mu, schedule, floor)
    return _run_fused(
        EMRouting,
        (votes, beta_alpha, beta_mu),
        {"schedule": schedule, "floor": floor, "backend": backend},
    )


def route(votes, config: RoutingConfig, beta_alpha=None, beta_mu=None, fused: bool = True):
    if config.kind == "dynamic":
        return dynamic_route(votes, config.iterations, fused=fused)
    return em_route(votes, beta_alpha, beta_mu, config.iterations, config.em, fused=fused)
