"""Train a family of variants identically and tabulate the outcome."""

from __future__ import annotations

import csv
import logging
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import PLACEMENT_VARIANTS, PlacementMap
from .train import TrainConfig, train

log = logging.getLogger(__name__)

BASELINE = "baseline"
CAPSULE_COUNTS = (2, 4, 8, 16)
TABLE_HEADER = ("variant", "status", "capsule_dim", "token_acc", "loss", "params", "wall_time")


@dataclass
class SweepRow:
    variant: str
    status: str = "ok"
    capsule_dim: int = 0  # d_model / l, 0 when no capsule layer is placed
    token_acc: float = float("nan")
    loss: float = float("nan")
    params: int = 0
    wall_time: float = 0.0


def placement_base(steps: int = 500, batch_size: int = 32) -> TrainConfig:
    """Toy dimensions with six layers, enough to host every grid variant.

    Six-layer steps cost about three times the two-layer default, so the
    batch is halved to keep the twelve-run grid affordable on one core.
    """
    base = TrainConfig(steps=steps, batch_size=batch_size, log_every=100, ckpt_every=steps)
    return replace(base, model=base.model.with_(depth=6))


def dedupe(variants, kind: str) -> list[str]:
    """Canonical spelling, first occurrence kept."""
    seen, out = set(), []
    for v in variants:
        key = str(v).strip()
        if kind == "placement" and key != BASELINE:
            try:
                parsed = PlacementMap.parse(key)
                key = str(parsed) if len(parsed) else BASELINE
            except ConfigError:
                pass  # left as typed; reported as skipped later
        if key not in seen:
            seen.add(key)
            out.append(key)
    return out


def variant_config(kind: str, variant: str, base: TrainConfig) -> TrainConfig:
    if kind == "placement":
        placement = PlacementMap() if variant == BASELINE else PlacementMap.parse(variant)
        return replace(base, model=base.model.with_(placement=placement))
    if kind == "capsule_count":
        try:
            l = int(variant)
        except ValueError:
            raise ConfigError(f"capsule count {variant!r} is not an integer") from None
        if l < 1 or base.model.d_model % l:
            raise ConfigError(f"l={l} does not divide d_model={base.model.d_model}")
        return replace(base, model=base.model.with_(capsules=l))
    raise ConfigError(f"unknown sweep kind {kind!r}")


def default_variants(kind: str) -> list[str]:
    if kind == "placement":
        return [BASELINE, *PLACEMENT_VARIANTS]
    if kind == "capsule_count":
        return [str(l) for l in CAPSULE_COUNTS]
    raise ConfigError(f"unknown sweep kind {kind!r}")


def sweep(kind: str, base: TrainConfig | None = None, seeds=(1,), variants=None, out_dir=None) -> list[SweepRow]:
    """One row per distinct variant; numbers are means over ``seeds``.

    Variants that fail to construct are kept in the table with their reason
    instead of aborting the sweep.
    """
    if base is None:
        base = placement_base() if kind == "placement" else TrainConfig(steps=500, log_every=100, ckpt_every=500)
    variants = dedupe(variants or default_variants(kind), kind)
    seeds = list(dict.fromkeys(seeds))
    with tempfile.TemporaryDirectory(prefix="capsattn-sweep-") as scratch:
        root = Path(out_dir) if out_dir else Path(scratch)
        rows = _run_variants(kind, base, seeds, variants, root / "runs")
    if out_dir:
        write_table(rows, Path(out_dir) / "results.csv")
    return rows


def _run_variants(kind, base, seeds, variants, runs_dir) -> list[SweepRow]:
    rows = []
    for variant in variants:
        try:
            cfg = variant_config(kind, variant, base)
        except ConfigError as exc:
            log.warning("skipping variant %s: %s", variant, exc)
            rows.append(SweepRow(variant, status=f"skipped: {exc}"))
            continue
        accs, losses, walls, params = [], [], [], 0
        for seed in seeds:
            run_dir = runs_dir / f"{_slug(variant)}-s{seed}"
            started = time.perf_counter()
            result = train(replace(cfg, seed=seed), run_dir)
            walls.append(time.perf_counter() - started)
            accs.append(result.eval["token_acc"])
            losses.append(result.eval["loss"])
            params = result.model.num_parameters()
        m = cfg.model
        dim = m.d_model // m.capsules if len(m.active_placement) else 0
        rows.append(SweepRow(variant, "ok", dim, float(np.mean(accs)), float(np.mean(losses)), params, float(np.sum(walls))))
        log.info("%s: token_acc %.4f", variant, rows[-1].token_acc)
    return rows


def _slug(variant: str) -> str:
    return variant.replace(",", "+")


def write_table(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for r in rows:
            w.writerow([r.variant, r.status, r.capsule_dim, repr(r.token_acc), repr(r.loss), r.params, f"{r.wall_time:.2f}"])


def format_table(rows) -> str:
    lines = [f"{'variant':<22} {'cap_dim':>7} {'token_acc':>9} {'loss':>8} {'params':>9} {'time[s]':>8}  status"]
    for r in rows:
        lines.append(f"{r.variant:<22} {r.capsule_dim:>7d} {r.token_acc:>9.4f} {r.loss:>8.4f} {r.params:>9d} {r.wall_time:>8.1f}  {r.status}")
    return "\n".join(lines)
