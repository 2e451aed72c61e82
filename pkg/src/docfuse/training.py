"""Supervised fine-tuning: learning-rate schedule, optimiser, train loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError, ValidationError
from .layout import LayoutDocument
from .model import DocModel
from .tensor import Tensor


@dataclass
class TrainConfig:
    total_steps: int = 1000
    batch_size: int = 16
    peak_lr: float = 1e-3
    mid_lr: float = 2e-4
    final_lr: float = 5e-5
    warmup_frac: float = 0.01
    linear_frac: float = 0.89
    weight_decay: float = 1e-5
    loss_reduction: str = "mean"
    optimizer: str = "adamw_scale"  # adamw_scale | adamw
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    max_chunks: int = 8
    permute_values: bool = False  # per-step value relabelling, see data.ValuePermutation
    zero_image: bool = False  # text-only ablation: image embeddings zeroed
    seed: int = 0

    def __post_init__(self):
        if self.warmup_frac < 0 or self.linear_frac < 0 or self.warmup_frac + self.linear_frac > 1:
            raise ConfigError("warmup_frac + linear_frac must lie in [0, 1]")
        if not self.peak_lr >= self.mid_lr >= self.final_lr > 0:
            raise ConfigError("learning rates must satisfy peak_lr >= mid_lr >= final_lr > 0")
        if self.loss_reduction != "mean":
            raise ConfigError("only mean loss reduction is supported")
        if self.optimizer not in ("adamw_scale", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.total_steps < 0 or self.batch_size < 1 or self.max_chunks < 1:
            raise ConfigError("total_steps >= 0, batch_size >= 1 and max_chunks >= 1 required")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Constant warm-up, linear decay to ``mid_lr``, cosine decay to ``final_lr``.

    The joints sit at ``warmup_frac * total_steps`` and
    ``(warmup_frac + linear_frac) * total_steps``; the cosine segment reaches
    ``final_lr`` at ``step == total_steps - 1``.
    """
    if not 0 <= step < cfg.total_steps:
        raise ValidationError(f"step {step} outside [0, {cfg.total_steps})")
    T = cfg.total_steps
    s1 = cfg.warmup_frac * T
    s2 = (cfg.warmup_frac + cfg.linear_frac) * T
    if step <= s1:
        return cfg.peak_lr
    if step <= s2:
        frac = (step - s1) / (s2 - s1)
        return cfg.peak_lr + (cfg.mid_lr - cfg.peak_lr) * frac
    last = T - 1
    if last <= s2:
        return cfg.mid_lr
    frac = (step - s2) / (last - s2)
    return cfg.final_lr + 0.5 * (cfg.mid_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adaptive moments with decoupled weight decay.

    ``scale=True`` multiplies each tensor's step by ``max(1e-3, rms(param))``,
    the T5-community "AdamWScale" variant; ``scale=False`` is plain AdamW.
    """

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.scale = cfg.optimizer == "adamw_scale"
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        out["opt.step"] = np.array([self.step_count], dtype=np.float64)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = arrays[f"opt.m.{k}"].copy()
            self.v[k] = arrays[f"opt.v.{k}"].copy()
        self.step_count = int(arrays["opt.step"][0])

    def step(self, lr: float) -> None:
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - c.beta1 ** t
        bc2 = 1 - c.beta2 ** t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            step_size = lr * math.sqrt(bc2) / bc1
            if self.scale:
                step_size *= max(1e-3, float(np.sqrt(np.mean(p.data.astype(np.float64) ** 2))))
            p.data -= (step_size * self.m[k] / (np.sqrt(self.v[k]) + c.adam_eps)).astype(p.dtype)
            if c.weight_decay > 0:
                p.data -= (lr * c.weight_decay) * p.data


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= f
    return total


@dataclass
class Example:
    doc: LayoutDocument
    question: list[int]
    answer: list[int]
    id: str = ""


def train_step(batch: Sequence[Example], model: DocModel, opt: AdamW, cfg: TrainConfig, lr: float,
               rng: np.random.Generator, zero_image: bool = False) -> float:
    """One optimisation step on ``batch``; returns the mean token loss."""
    for p in model.params.values():
        p.zero_grad()
    loss = model.loss([e.doc for e in batch], [e.question for e in batch], [e.answer for e in batch],
                      training=True, rng=rng, max_chunks=cfg.max_chunks, zero_image=zero_image)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss on examples {[e.id for e in batch]}")
    loss.backward()
    clip_gradients(model.params, cfg.grad_clip)
    opt.step(lr)
    return value


def fit(dataset: Sequence[Example], model: DocModel, cfg: TrainConfig, out_dir=None, start_step: int = 0,
        opt: AdamW | None = None, log_every: int = 0, zero_image: bool | None = None,
        augment: Callable | None = None, end_step: int | None = None) -> list[dict]:
    """Run ``train_step`` from ``start_step`` to ``end_step`` (default
    ``cfg.total_steps``); stopping early leaves a checkpoint that
    :func:`resume` continues on the same schedule.

    Batches come from a seeded reshuffle every epoch. ``augment(doc, question,
    answer, rng)`` may rewrite each example per step (required when
    ``cfg.permute_values`` is set). When ``out_dir`` is given, the checkpoint
    and a line-delimited metrics log are written there.
    """
    if cfg.permute_values and augment is None:
        raise ConfigError("permute_values needs an augment callable (see data.ValuePermutation)")
    if not dataset:
        raise ValidationError("cannot train on an empty dataset")
    end_step = cfg.total_steps if end_step is None else end_step
    if not start_step <= end_step <= cfg.total_steps:
        raise ConfigError(f"need start_step <= end_step <= total_steps, got {start_step}, {end_step}")
    zero_image = cfg.zero_image if zero_image is None else zero_image
    opt = AdamW(model.params, cfg) if opt is None else opt
    data_rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    log: list[dict] = []
    # fast-forward the data stream so resumed runs see the same batches
    for _ in range(start_step * cfg.batch_size):
        if not order:
            order = data_rng.permutation(len(dataset)).tolist()
        order.pop()
    for step in range(start_step, end_step):
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = data_rng.permutation(len(dataset)).tolist()
            batch.append(dataset[order.pop()])
        lr = lr_schedule(step, cfg)
        if augment is not None and cfg.permute_values:
            aug_rng = np.random.default_rng([cfg.seed, 3, step])
            batch = [Example(*augment(e.doc, e.question, e.answer, aug_rng), id=e.id) for e in batch]
        loss = train_step(batch, model, opt, cfg, lr, np.random.default_rng([cfg.seed, 2, step]), zero_image)
        log.append({"step": step, "loss": loss, "lr": lr})
        if log_every and step % log_every == 0:
            print(f"step {step:5d} loss {loss:.4f} lr {lr:.2e}", flush=True)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.ckpt", model, opt, step=end_step)
        mode = "a" if start_step else "w"
        with open(out / "metrics.jsonl", mode) as fh:
            for rec in log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (out / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return log


def resume(ckpt_path, dataset, cfg: TrainConfig, out_dir=None, **kw) -> tuple[DocModel, list[dict]]:
    model, opt_arrays, step = load_checkpoint(ckpt_path, with_optimizer=True)
    opt = AdamW(model.params, cfg)
    if opt_arrays:
        opt.load_state(opt_arrays)
    log = fit(dataset, model, cfg, out_dir, start_step=step, opt=opt, **kw) if step < cfg.total_steps else []
    return model, log
