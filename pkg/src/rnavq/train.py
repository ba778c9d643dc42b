"""Autoencoder training loop with gradient accumulation and exact resume."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .model import RnaAutoencoder
from .optim import AdamW, clip_grad_norm
from .structure import RnaStructure

log = logging.getLogger(__name__)

LOG_HEADER = "step\tflow_loss\tgrad_norm\tlr"


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-4
    min_lr: float = 0.0
    warmup: int = 0
    accumulation: int = 8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    cond_drop_prob: float = 0.1
    augment_rotation: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0 or self.accumulation < 1:
            raise ValueError("steps must be >= 0 and accumulation >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError("cond_drop_prob must lie in [0, 1]")

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to ``min_lr``."""
        if self.warmup and step <= self.warmup:
            return self.lr * step / self.warmup
        if self.min_lr >= self.lr or self.steps <= self.warmup:
            return self.lr
        frac = (step - self.warmup) / max(1, self.steps - self.warmup)
        return self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + math.cos(math.pi * min(1.0, frac)))


def save_training_state(path, model: RnaAutoencoder, opt: AdamW, cfg: TrainConfig, step: int) -> None:
    model.save(path, extra_tensors=opt.state_arrays(),
               extra_meta={"step": step, "train": asdict(cfg)})


def train(model: RnaAutoencoder, corpus: Sequence[RnaStructure], cfg: TrainConfig,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          on_log: Callable[[dict], None] | None = None) -> list[dict]:
    """Train for ``cfg.steps`` optimiser steps; returns one log row per step.

    Randomness for step ``k`` comes from ``make_rng(seed, k)`` alone, so a
    run resumed from a checkpoint at step ``k`` matches an uninterrupted one.
    """
    cfg.validate()
    if not corpus:
        raise ValueError("training corpus is empty")
    params = model.named_parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    start = 0
    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        if "step" not in meta:
            raise CheckpointError(f"{resume}: not a training checkpoint")
        model.load_state_dict(tensors)
        opt.load_state_arrays(tensors, int(meta["step"]))
        start = int(meta["step"])
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for step in range(start + 1, cfg.steps + 1):
        rng = T.make_rng(cfg.seed, step)
        total = 0.0
        for _ in range(cfg.accumulation):
            s = corpus[int(rng.integers(len(corpus)))]
            with T.Tape() as tape:
                loss = model.flow_loss(s, rng, cfg.cond_drop_prob, cfg.augment_rotation)
                scaled = loss * (1.0 / cfg.accumulation)
            tape.backward(scaled)
            total += loss.item()
        gnorm = clip_grad_norm(params, cfg.grad_clip)
        lr = cfg.lr_at(step)
        opt.step(lr)
        opt.zero_grad()
        row = {"step": step, "flow_loss": total / cfg.accumulation, "grad_norm": gnorm, "lr": lr}
        rows.append(row)
        if on_log is not None:
            on_log(row)
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_training_state(out_dir / f"ckpt_step{step:06d}.bin", model, opt, cfg, step)
    if out_dir is not None:
        save_training_state(out_dir / "model.ckpt", model, opt, cfg, max(start, cfg.steps))
    return rows


def format_log_row(row: dict) -> str:
    return f"{row['step']}\t{row['flow_loss']:.17g}\t{row['grad_norm']:.17g}\t{row['lr']:.17g}"
