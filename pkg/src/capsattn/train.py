"""Training loop, evaluation and run persistence.

A run directory holds::

    config.txt       key=value echo of the model and training settings
    metrics.csv      step,loss,token_acc,seq_acc  (training batches, windowed)
    eval.csv         step,loss,token_acc,seq_acc  (held-out samples)
    checkpoint.caps  parameters plus Adam state
    summary.json     final numbers and wall time
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_model_state, model_state, save_checkpoint
from .model import PAD, ModelConfig, Transformer, build_model, forward_loss, greedy_decode
from .tasks import EVAL_STREAM, TaskSpec, make_batch

log = logging.getLogger(__name__)

METRICS_HEADER = "step,loss,token_acc,seq_acc"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1.0  # multiplier on the inverse-sqrt schedule
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    smoothing: float = 0.0
    seed: int = 42
    log_every: int = 50
    ckpt_every: int = 500
    eval_samples: int = 256
    target_acc: float | None = None  # stop early once held-out token accuracy reaches this

    def to_text(self) -> str:
        lines = [self.model.to_text().rstrip("\n")]
        for k, v in asdict(self.task).items():
            lines.append(f"task.{k}={v}")
        for f in fields(self):
            if f.name in ("model", "task"):
                continue
            lines.append(f"train.{f.name}={getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        model = ModelConfig.from_text(text)
        task_kw, train_kw = {}, {}
        kinds = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            key, _, value = line.strip().partition("=")
            if key.startswith("task."):
                name = key[5:]
                task_kw[name] = value if name == "kind" else int(value)
            elif key.startswith("train."):
                name = key[6:]
                if name not in kinds:
                    continue
                if value == "None":
                    train_kw[name] = None
                elif kinds[name] in ("int",):
                    train_kw[name] = int(value)
                else:
                    train_kw[name] = float(value)
        return cls(model=model, task=TaskSpec(**task_kw), **train_kw)


def noam_lr(step: int, d_model: int, warmup: int, scale: float) -> float:
    step = max(step, 1)
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if lr == 0.0:
                continue
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state(self) -> dict:
        out = {}
        for name, _ in self.params:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        out["optim.step"] = np.array([self.t], dtype=np.float32)
        return out

    def load(self, entries) -> None:
        for name, p in self.params:
            self.m[name][...] = entries[f"optim.m.{name}"]
            self.v[name][...] = entries[f"optim.v.{name}"]
        self.t = int(entries["optim.step"][0])


def batch_accuracy(logits: np.ndarray, tgt: np.ndarray) -> tuple[int, int, int, int]:
    """(correct tokens, counted tokens, correct sequences, sequences)."""
    pred = logits.argmax(-1)
    valid = tgt != PAD
    hit = (pred == tgt) & valid
    seq_ok = (hit | ~valid).all(axis=1)
    return int(hit.sum()), int(valid.sum()), int(seq_ok.sum()), len(tgt)


def evaluate(model: Transformer, task: TaskSpec, seed: int, n_samples: int, batch_size: int = 128) -> dict:
    """Teacher-forced loss and accuracies on held-out samples."""
    tot_loss = tot_tok = hit_tok = hit_seq = n_seq = 0.0
    with T.no_grad():
        for start in range(0, n_samples, batch_size):
            count = min(batch_size, n_samples - start)
            src, tgt = make_batch(task, seed, start, count, stream=EVAL_STREAM)
            loss, logits = forward_loss(model, src, tgt)
            h, n, hs, ns = batch_accuracy(logits.data, tgt)
            tot_loss += loss.item() * n
            tot_tok += n
            hit_tok += h
            hit_seq += hs
            n_seq += ns
    return {"loss": tot_loss / tot_tok, "token_acc": hit_tok / tot_tok, "seq_acc": hit_seq / n_seq}


def greedy_accuracy(model: Transformer, task: TaskSpec, seed: int, n_samples: int) -> float:
    """Fraction of held-out sources whose greedy decode equals the target."""
    src, tgt = make_batch(task, seed, 0, n_samples, stream=EVAL_STREAM)
    out = greedy_decode(model, src, max_len=tgt.shape[1] + 1)
    ok = 0
    for row, pred in zip(tgt, out):
        ref = [int(x) for x in row if x != PAD][:-1]
        ok += pred == ref
    return ok / n_samples


def _fmt(x: float) -> str:
    return repr(float(x))


def _truncate_csv(path: Path, upto: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        if line == METRICS_HEADER or int(line.split(",", 1)[0]) <= upto:
            keep.append(line)
    path.write_text("\n".join(keep) + "\n")


def _append(path: Path, row) -> None:
    with open(path, "a") as fh:
        fh.write(",".join([str(row[0])] + [_fmt(x) for x in row[1:]]) + "\n")


@dataclass
class TrainResult:
    step: int
    eval: dict
    model: Transformer
    out_dir: Path
    wall_time: float
    stopped_early: bool = False


def save_run_checkpoint(path: Path, model: Transformer, opt: Adam) -> None:
    entries = model_state(model)
    entries.update(opt.state())
    save_checkpoint(path, entries)


def load_run(out_dir) -> tuple[TrainConfig, Transformer]:
    """Rebuild the model stored in a run directory."""
    out_dir = Path(out_dir)
    cfg = TrainConfig.from_text((out_dir / "config.txt").read_text())
    model = build_model(cfg.model, cfg.seed)
    load_model_state(model, load_checkpoint(out_dir / "checkpoint.caps"))
    return cfg, model


def train(cfg: TrainConfig, out_dir, resume: bool = False, loss_hook=None) -> TrainResult:
    """Run ``cfg.steps`` Adam steps (fewer if ``target_acc`` is reached).

    ``loss_hook(step, loss_value) -> loss_value`` is a test seam for
    injecting failures.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    eval_path = out_dir / "eval.csv"
    ckpt_path = out_dir / "checkpoint.caps"
    started = time.perf_counter()

    model = build_model(cfg.model, cfg.seed)
    params = list(model.named_parameters())
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    start_step = 0
    if resume and ckpt_path.exists():
        entries = load_checkpoint(ckpt_path)
        load_model_state(model, entries)
        opt.load(entries)
        start_step = opt.t
        _truncate_csv(metrics_path, start_step)
        _truncate_csv(eval_path, start_step)
        log.info("resumed from step %d", start_step)
    else:
        (out_dir / "config.txt").write_text(cfg.to_text())
        metrics_path.write_text(METRICS_HEADER + "\n")
        eval_path.write_text(METRICS_HEADER + "\n")

    window = [0.0, 0, 0, 0, 0, 0]  # loss sum, batches, tok hit, tok n, seq hit, seq n
    ev = None
    stopped = False
    step = start_step
    for step in range(start_step + 1, cfg.steps + 1):
        src, tgt = make_batch(cfg.task, cfg.seed, (step - 1) * cfg.batch_size, cfg.batch_size)
        loss, logits = forward_loss(model, src, tgt, smoothing=cfg.smoothing)
        value = loss.item()
        if loss_hook is not None:
            value = loss_hook(step, value)
        if not math.isfinite(value):
            (out_dir / "diagnostics.txt").write_text(
                f"non-finite loss {value!r} at step {step}\n"
                f"last checkpoint: {ckpt_path if ckpt_path.exists() else 'none'}\n"
            )
            raise TrainingDiverged(f"loss became {value!r} at step {step}")
        model.zero_grad()
        loss.backward()
        opt.step(noam_lr(step, cfg.model.d_model, cfg.warmup, cfg.lr))

        h, n, hs, ns = batch_accuracy(logits.data, tgt)
        window[0] += value
        window[1] += 1
        window[2] += h
        window[3] += n
        window[4] += hs
        window[5] += ns
        if step % cfg.log_every == 0 or step == cfg.steps:
            _append(metrics_path, (step, window[0] / window[1], window[2] / window[3], window[4] / window[5]))
            window = [0.0, 0, 0, 0, 0, 0]
            ev = evaluate(model, cfg.task, cfg.seed, cfg.eval_samples)
            _append(eval_path, (step, ev["loss"], ev["token_acc"], ev["seq_acc"]))
            log.info("step %d loss %.4f eval token_acc %.4f", step, value, ev["token_acc"])
            if cfg.target_acc is not None and ev["token_acc"] >= cfg.target_acc:
                stopped = True
        if step % cfg.ckpt_every == 0 or stopped or step == cfg.steps:
            save_run_checkpoint(ckpt_path, model, opt)
        if stopped:
            break

    if ev is None:
        ev = evaluate(model, cfg.task, cfg.seed, cfg.eval_samples)
    wall = time.perf_counter() - started
    summary = {
        "step": step,
        "params": model.num_parameters(),
        "eval": ev,
        "stopped_early": stopped,
        "wall_time": wall,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return TrainResult(step, ev, model, out_dir, wall, stopped)
