"""Parameter storage, AdamW and the warmup/step-decay learning-rate schedule."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class FrozenError(RuntimeError):
    pass


class ParamStore:
    """Named trainable tensors plus their gradients and AdamW moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray | None] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.ema: dict[str, np.ndarray] | None = None
        self.step = 0
        self._frozen = False

    def add(self, name: str, value) -> Tensor:
        if self._frozen:
            raise FrozenError(f"cannot add {name!r} to a frozen store")
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.grads[name] = None
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return sum(t.size for t in self.params.values())

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        """Make every parameter read-only and exclude it from gradient tracking."""
        for t in self.params.values():
            t.data.flags.writeable = False
            t.requires_grad = False
        self._frozen = True

    def collect_grads(self, grads: dict[int, np.ndarray]) -> None:
        for name, t in self.params.items():
            g = grads.get(id(t))
            self.grads[name] = np.zeros_like(t.data) if g is None else g

    def zero_grad(self) -> None:
        for name in self.grads:
            self.grads[name] = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values() if g is not None))

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        if self._frozen:
            raise FrozenError("parameters are frozen")
        for name, arr in values.items():
            t = self.params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: expected shape {list(t.shape)}, got {list(arr.shape)}")
            t.data = arr.copy()

    def values(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def round_to_f32(self) -> None:
        """Snap every value onto the f32 grid so checkpoints round-trip exactly."""
        self.set_values({k: v.astype(np.float32).astype(np.float64) for k, v in self.values().items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.data.astype("<f4").tobytes())
        return h.hexdigest()[:16]

    def update_ema(self, decay: float) -> None:
        if self.ema is None:
            self.ema = {k: v.copy() for k, v in self.values().items()}
            return
        for name, t in self.params.items():
            self.ema[name] = decay * self.ema[name] + (1.0 - decay) * t.data


def clip_grad_norm(stores, max_norm: float) -> float:
    """Scale gradients of all stores jointly so their global norm is at most max_norm."""
    total = math.sqrt(sum(s.grad_norm() ** 2 for s in stores))
    if total > max_norm > 0:
        k = max_norm / (total + 1e-12)
        for s in stores:
            for name, g in s.grads.items():
                if g is not None:
                    s.grads[name] = g * k
    return total


def adamw_step(
    params: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> ParamStore:
    if params.frozen:
        raise FrozenError("cannot step a frozen parameter store")
    if not params.grads or any(g is None for g in params.grads.values()):
        raise RuntimeError("adamw_step called without populated gradients")
    params.step += 1
    bc1 = 1.0 - beta1**params.step
    bc2 = 1.0 - beta2**params.step
    for name, t in params.params.items():
        g = params.grads[name]
        m = params.m[name] = beta1 * params.m[name] + (1.0 - beta1) * g
        v = params.v[name] = beta2 * params.v[name] + (1.0 - beta2) * (g * g)
        w = t.data
        if weight_decay:
            w = w - lr * weight_decay * w
        t.data = w - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params.zero_grad()
    return params


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    warmup_steps: int = 1000
    decay_interval: int = 5000
    decay_factor: float = 0.5

    def __post_init__(self):
        if self.base_lr <= 0 or self.warmup_steps < 1 or self.decay_interval < 1:
            raise ValueError(f"invalid schedule {self}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    k = (step - schedule.warmup_steps) // schedule.decay_interval
    return schedule.base_lr * schedule.decay_factor**k
