"""Training-free semantic editing with the planner's delta velocity field.

The edit is carried as a displacement ``delta`` on top of the source plan.
At each grid time ``t`` a shared noise draw ``n`` places the source on its
straight path, ``src_t = (1 - t) n + t s_src``, the target branch sits at
``src_t + delta``, and ``delta`` moves along the difference between the
planner's velocities under the target and source conditions.  The source
condition may be the all-zero (null) condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acoustic import AcousticVae, SynthesizerModel, project_semantics, synth_sample, vae_decode
from .planner import PlannerModel, as_condition_batch, check_compatible
from .tensor import ShapeError
from .world import oracle_encode_semantics


@dataclass(frozen=True)
class EditConfig:
    n_avg: int = 8
    steps: int = 50
    t_start: float = 1.0 / 3.0
    conditional_source: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_avg < 1 or self.steps < 1:
            raise ValueError("n_avg and steps must be >= 1")
        if not 0.0 <= self.t_start < 1.0:
            raise ValueError(f"t_start must lie in [0, 1), got {self.t_start}")


@dataclass
class EditState:
    """Source plan and accumulated displacement, both in planner coordinates [B, dim]."""

    source: np.ndarray
    delta: np.ndarray
    t: float = 0.0

    @classmethod
    def start(cls, source: np.ndarray) -> EditState:
        return cls(source, np.zeros_like(source))

    @property
    def edited(self) -> np.ndarray:
        return self.source + self.delta


def delta_velocity(planner: PlannerModel, x_tgt, x_src, t: float, c_tgt, c_src) -> np.ndarray:
    x_tgt = np.asarray(x_tgt, dtype=np.float64)
    x_src = np.asarray(x_src, dtype=np.float64)
    if x_tgt.shape != x_src.shape:
        raise ShapeError("delta_velocity", x_tgt.shape, x_src.shape)
    return planner.velocity(t, x_tgt, c_tgt) - planner.velocity(t, x_src, c_src)


def averaged_delta(planner: PlannerModel, state: EditState, t: float, c_tgt, c_src, n_avg: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Mean delta velocity over ``n_avg`` shared-noise realisations; shape [B, dim]."""
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    batch, dim = state.source.shape
    noise = rng.standard_normal((n_avg, batch, dim))
    src = (1.0 - t) * noise + t * state.source[None]
    tgt = src + state.delta[None]
    ct = np.broadcast_to(c_tgt, (n_avg, batch, c_tgt.shape[-1])).reshape(n_avg * batch, -1)
    cs = np.broadcast_to(c_src, (n_avg, batch, c_src.shape[-1])).reshape(n_avg * batch, -1)
    v = delta_velocity(planner, tgt.reshape(-1, dim), src.reshape(-1, dim), t, ct, cs)
    return v.reshape(n_avg, batch, dim).mean(axis=0)


def _conditions(c_tgt, c_src, batch: int) -> tuple[np.ndarray, np.ndarray]:
    ct = as_condition_batch(c_tgt)
    cs = np.zeros_like(ct) if c_src is None else as_condition_batch(c_src)
    if ct.shape[0] == 1 and batch > 1:
        ct = np.repeat(ct, batch, axis=0)
    if cs.shape[0] == 1 and batch > 1:
        cs = np.repeat(cs, batch, axis=0)
    if ct.shape[0] != batch or cs.shape != ct.shape:
        raise ShapeError("edit conditions", ct.shape, cs.shape)
    return ct, cs


def edit_grid(steps: int, t_start: float) -> list[tuple[float, float]]:
    """(t_k, t_{k+1}) pairs of the uniform grid with t_k >= t_start."""
    return [(k / steps, (k + 1) / steps) for k in range(steps) if k / steps >= t_start]


def edit_semantics(planner: PlannerModel, s_src, c_tgt, c_src=None, config: EditConfig = EditConfig()) -> np.ndarray:
    """Edit plan(s) ``s_src`` [N, d] or [B, N, d] toward ``c_tgt``.

    ``c_src=None`` (or ``config.conditional_source=False``) runs null-source
    mode, which needs nothing about the source beyond its plan.
    """
    s_src = np.asarray(s_src, dtype=np.float64)
    single = s_src.ndim == 2
    x_src = planner.to_latent(s_src)
    if not config.conditional_source:
        c_src = None
    ct, cs = _conditions(c_tgt, c_src, x_src.shape[0])
    state = EditState.start(x_src)
    rng = np.random.default_rng(config.seed)
    for t0, t1 in edit_grid(config.steps, config.t_start):
        state.t = t0
        state.delta = state.delta + (t1 - t0) * averaged_delta(planner, state, t0, ct, cs, config.n_avg, rng)
        if not np.all(np.isfinite(state.delta)):
            raise FloatingPointError(f"non-finite edit displacement at t={t0:.4f}")
    # map the displacement, not the endpoint, back to head coordinates so a
    # zero displacement returns the source exactly
    out = s_src.reshape(x_src.shape) + state.delta * planner.target_std
    out = out.reshape(-1, *s_src.shape[-2:])
    return out[0] if single else out


def source_plan(synthesizer: SynthesizerModel, spectrogram) -> np.ndarray:
    return project_semantics(synthesizer.head, oracle_encode_semantics(spectrogram))


def edit_end_to_end(planner: PlannerModel, synthesizer: SynthesizerModel, vae: AcousticVae, source_spec, c_tgt,
                    c_src=None, config: EditConfig = EditConfig(), synth_steps: int = 25, synth_seed: int = 1) -> np.ndarray:
    """Source spectrogram(s) -> edited plan -> acoustic latent -> spectrogram."""
    check_compatible(planner, synthesizer)
    s_src = source_plan(synthesizer, source_spec)
    s_edit = edit_semantics(planner, s_src, c_tgt, c_src, config)
    return vae_decode(vae, synth_sample(synthesizer, s_edit, synth_steps, 1.0, synth_seed))
