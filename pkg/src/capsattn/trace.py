"""Routing-trace export for one capsule site of a trained model."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_model_state
from .errors import ConfigError
from .model import EOS, ModelConfig, Transformer, build_model, greedy_decode
from .routing import RoutingTrace

ROW_TOLERANCE = 1e-6


class TraceError(ValueError):
    pass


def load_model(ckpt, config=None) -> Transformer:
    """Model from a checkpoint; the config defaults to ``config.txt`` beside it."""
    ckpt = Path(ckpt)
    config = Path(config) if config else ckpt.with_name("config.txt")
    if not config.exists():
        raise ConfigError(f"no config found for {ckpt} (looked for {config})")
    model = build_model(ModelConfig.from_text(config.read_text()))
    load_model_state(model, load_checkpoint(ckpt))
    return model


def parse_tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"token list must be integers, got {text!r}") from None


def routing_trace(model: Transformer, tokens, site: str, target=None) -> RoutingTrace:
    """Run the model on one source sequence and capture routing at ``site``.

    Without ``target`` the decoder input comes from greedy decoding, so
    decoder sites see the model's own continuation.
    """
    sites = model.capsule_sites()
    if site not in sites:
        listed = ", ".join(sites) or "none"
        raise TraceError(f"site {site!r} not in model; available sites: {listed}")
    src = np.asarray([list(tokens) + [EOS]], dtype=np.int64)
    if target is None:
        target = greedy_decode(model, src, model.config.max_len - 1)[0]
    tgt = np.asarray([list(target) + [EOS]], dtype=np.int64)
    layer = sites[site]
    layer.capture = True
    try:
        with T.no_grad():
            model(src, tgt)
        trace = layer.last_trace
    finally:
        layer.capture = False
        layer.last_trace = None
    err = trace.max_row_error()
    if err > ROW_TOLERANCE:
        raise TraceError(f"assignment rows deviate from 1 by {err:.3e}")
    return trace


def _columns(rec: dict) -> list[str]:
    cols = ["position", "iteration"]
    for key in ("c", "v", "sigma2", "alpha"):
        if key in rec:
            cols += [f"{key}_{i}" for i in range(len(rec[key]))]
    return cols


def trace_to_csv(trace: RoutingTrace) -> str:
    buf = io.StringIO()
    writer = None
    for rec in trace.records():
        if writer is None:
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(_columns(rec))
        row = [rec["position"], rec["iteration"]]
        for key in ("c", "v", "sigma2", "alpha"):
            row += [repr(float(x)) for x in rec.get(key, ())]
        writer.writerow(row)
    return buf.getvalue()


def trace_to_jsonl(trace: RoutingTrace) -> str:
    return "".join(json.dumps(rec) + "\n" for rec in trace.records())


def write_trace(trace: RoutingTrace, path=None, fmt: str | None = None) -> str:
    """Serialise ``trace``; the format follows ``fmt`` or the file suffix."""
    if fmt is None:
        fmt = "jsonl" if path and str(path).endswith((".jsonl", ".json")) else "csv"
    if fmt not in ("csv", "jsonl"):
        raise ConfigError(f"unknown trace format {fmt!r}")
    text = trace_to_csv(trace) if fmt == "csv" else trace_to_jsonl(trace)
    if path:
        Path(path).write_text(text)
    return text
