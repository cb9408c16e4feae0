"""Shared optimisation loop used by every trainable component."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .optim import LrSchedule, ParamStore, adamw_step, clip_grad_norm, lr_at
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"loss became {loss} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 32
    base_lr: float = 1e-4
    warmup_steps: int = 1000
    decay_interval: int = 5000
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 0.0  # 0 disables clipping
    ema_decay: float = 0.0  # 0 disables EMA
    t_mu: float = 0.4
    t_sigma: float = 1.0
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 0

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.warmup_steps, self.decay_interval, self.decay_factor)


def fit(stores: Sequence[ParamStore], loss_fn: Callable[[int], Tensor], cfg: TrainConfig, name: str = "") -> np.ndarray:
    """Run ``cfg.steps`` AdamW updates of ``loss_fn(step)`` over all ``stores``.

    Returns the per-step loss history.  With EMA enabled the stores end up
    holding their averaged weights.
    """
    history = np.empty(cfg.steps)
    tape = Tape()
    for step in range(1, cfg.steps + 1):
        with tape:
            loss = loss_fn(step)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence(step, value)
        grads = backward(loss)
        tape.reset()
        for s in stores:
            s.collect_grads(grads)
        if cfg.clip_norm > 0:
            clip_grad_norm(stores, cfg.clip_norm)
        lr = lr_at(cfg.schedule, step)
        for s in stores:
            adamw_step(s, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            if cfg.ema_decay > 0:
                s.update_ema(cfg.ema_decay)
        history[step - 1] = value
        if cfg.log_every and step % cfg.log_every == 0:
            lo = max(0, step - cfg.log_every)
            log.info("%s step %d loss %.5f lr %.2e", name, step, history[lo:step].mean(), lr)
    if cfg.ema_decay > 0:
        for s in stores:
            s.set_values(s.ema)
    return history
