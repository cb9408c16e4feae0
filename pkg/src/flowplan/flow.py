"""Flow Matching primitives and the MLP velocity network.

Convention: t = 0 is noise, t = 1 is data, and the straight path is
``x_t = (1 - t) x0 + t x1`` with target velocity ``x1 - x0``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .tensor import ShapeError, Tensor

TIME_DIM = 32


class IntegrationError(FloatingPointError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite state at integration step {step}")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.guidance_scale < 0:
            raise ValueError(f"guidance_scale must be >= 0, got {self.guidance_scale}")


def interpolate(x0, x1, t: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError("interpolate", x0.shape, x1.shape)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t_arr.ndim == 1:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - t_arr) * x0 + t_arr * x1


def fm_loss(v_pred, x0, x1) -> Tensor:
    """Mean squared error between predicted velocity and the straight-path target."""
    v_pred = T.as_tensor(v_pred)
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if not (v_pred.shape == x0.shape == x1.shape):
        raise ShapeError("fm_loss", v_pred.shape, x0.shape, x1.shape)
    diff = T.sub(v_pred, Tensor(x1 - x0))
    return T.mean(T.mul(diff, diff))


def sample_timestep(rng: np.random.Generator, mu: float = 0.4, sigma: float = 1.0, size=None):
    """Logit-normal draw ``sigmoid(mu + sigma * n)``."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    n = rng.standard_normal(size)
    return 1.0 / (1.0 + np.exp(-(mu + sigma * n)))


def cfg_velocity(v_cond, v_uncond, g: float) -> np.ndarray:
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError("cfg_velocity", v_cond.shape, v_uncond.shape)
    # exact endpoints, not just up to rounding
    if g == 1.0:
        return v_cond.copy()
    if g == 0.0:
        return v_uncond.copy()
    return v_uncond + g * (v_cond - v_uncond)


def euler_integrate(field: Callable, x_init, cond, config: SamplerConfig) -> np.ndarray:
    """Integrate dx/dt = field(t, x, cond) from t=0 to t=1 on a uniform grid."""
    x = np.array(x_init, dtype=np.float64)
    h = 1.0 / config.steps
    for k in range(config.steps):
        x = x + h * np.asarray(field(k * h, x, cond), dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(k)
    return x


def time_embedding(t, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal embedding with geometric frequencies from 1 to 1000; returns [B, dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.geomspace(1.0, 1000.0, dim // 2)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass(frozen=True)
class VelocityConfig:
    state_dim: int
    cond_dim: int
    width: int = 256
    depth: int = 3
    time_dim: int = TIME_DIM


class VelocityModel:
    """concat[x, cond, temb(t)] -> SiLU MLP with residual hidden blocks -> velocity.

    The output layer starts at zero, so an untrained model is the zero field.
    """

    def __init__(self, config: VelocityConfig, seed: int = 0):
        if config.depth < 1 or config.width < 1:
            raise ValueError(f"bad architecture {config}")
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        fan_in = config.state_dim + config.cond_dim + config.time_dim
        dims = [fan_in] + [config.width] * config.depth
        for i in range(config.depth):
            self.params.add(f"h{i}.w", rng.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i]))
            self.params.add(f"h{i}.b", np.zeros(dims[i + 1]))
        self.params.add("out.w", np.zeros((config.width, config.state_dim)))
        self.params.add("out.b", np.zeros(config.state_dim))

    def forward(self, t, x, cond) -> Tensor:
        cfg = self.config
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != cfg.state_dim:
            raise ShapeError("velocity_forward[x]", x.shape, (x.shape[0] if x.data.ndim else 1, cfg.state_dim))
        batch = x.shape[0]
        cond = T.as_tensor(cond)
        if cond.shape != (batch, cfg.cond_dim):
            raise ShapeError("velocity_forward[cond]", cond.shape, (batch, cfg.cond_dim))
        t = np.asarray(t, dtype=np.float64)
        temb = time_embedding(np.broadcast_to(t, (batch,)) if t.ndim == 0 else t, cfg.time_dim)
        if temb.shape[0] != batch:
            raise ShapeError("velocity_forward[t]", t.shape, (batch,))
        p = self.params
        h = T.concat([x, cond, Tensor(temb)], axis=1)
        h = T.silu(T.add_bias(T.matmul(h, p["h0.w"]), p["h0.b"]))
        for i in range(1, cfg.depth):
            h = T.add(h, T.silu(T.add_bias(T.matmul(h, p[f"h{i}.w"]), p[f"h{i}.b"])))
        return T.add_bias(T.matmul(h, p["out.w"]), p["out.b"])

    def __call__(self, t, x, cond) -> np.ndarray:
        """Tape-free evaluation on plain arrays; accepts a single unbatched state."""
        x = np.asarray(x, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x, cond = x[None, :], cond[None, :]
        with _no_tape():
            out = self.forward(t, Tensor(x), Tensor(cond)).data
        return out[0] if single else out

    def arch(self) -> dict:
        return asdict(self.config)

    @classmethod
    def from_arrays(cls, arch: dict, arrays: dict[str, np.ndarray]) -> VelocityModel:
        model = cls(VelocityConfig(**arch))
        model.params.set_values(arrays)
        return model


def velocity_forward(model: VelocityModel, t, x, cond) -> Tensor:
    return model.forward(t, x, cond)


class _no_tape:
    """Temporarily hide any active tape so evaluation records nothing."""

    def __enter__(self):
        self._saved = T._stack()[:]
        T._stack().clear()

    def __exit__(self, *exc):
        T._stack().extend(self._saved)


def parameter_count(state_dim: int, cond_dim: int, width: int, depth: int, time_dim: int = TIME_DIM) -> int:
    fan_in = state_dim + cond_dim + time_dim
    return fan_in * width + width + (depth - 1) * (width * width + width) + width * state_dim + state_dim
