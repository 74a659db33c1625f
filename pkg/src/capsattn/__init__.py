"""Capsule routing over attention heads, on a small numpy autodiff engine.

The concatenation of head outputs in multi-head attention is replaced by a
routing step (dynamic or EM) that groups ``h`` head vectors into ``l``
output capsules.
"""

import os

# single-threaded BLAS keeps training byte-for-byte reproducible; has to be
# set before numpy loads its BLAS
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .attention import AttentionMask, MultiHeadAttention, MultiHeadConfig, multi_head_attention, scaled_dot_attention
from .capsule import CapsuleLayer, CapsuleLayerConfig, CapsuleLayerParams, capsule_layer_forward, param_count
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DomainError, NonFiniteError, ShapeError
from .model import ModelConfig, PlacementMap, Transformer, build_model, greedy_decode
from .routing import EmHyper, RoutingConfig, RoutingTrace, compute_votes, dynamic_route, em_route, squash
from .tasks import TaskSpec
from .tensor import Tensor, no_grad, precision
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionMask",
    "CapsuleLayer",
    "CapsuleLayerConfig",
    "CapsuleLayerParams",
    "ConfigError",
    "DomainError",
    "EmHyper",
    "ModelConfig",
    "MultiHeadAttention",
    "MultiHeadConfig",
    "NonFiniteError",
    "PlacementMap",
    "RoutingConfig",
    "RoutingTrace",
    "ShapeError",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "Transformer",
    "build_model",
    "capsule_layer_forward",
    "compute_votes",
    "dynamic_route",
    "em_route",
    "greedy_decode",
    "load_checkpoint",
    "multi_head_attention",
    "no_grad",
    "param_count",
    "precision",
    "save_checkpoint",
    "scaled_dot_attention",
    "squash",
    "train",
]
