"""Text-to-semantic planner and the full generation pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acoustic import AcousticVae, ProjectionHead, SynthesizerModel, project_semantics, synth_sample, vae_decode
from .checkpoint import load_checkpoint, save_checkpoint
from .flow import SamplerConfig, VelocityConfig, VelocityModel, cfg_velocity, euler_integrate, fm_loss, sample_timestep
from .tensor import ShapeError, Tensor
from .training import TrainConfig, fit
from .world import COND_DIM, N, DatasetShard, PromptCondition, PromptSpec, encode_prompt


class HeadMismatch(ValueError):
    pass


class PlannerModel:
    """Velocity model over standardised plans ``(s_hat - mean) / std``.

    Sampling and editing helpers take and return plans in head coordinates;
    the standardisation is internal.
    """

    def __init__(self, d: int, head_checksum: str, width: int = 256, depth: int = 3, seed: int = 0,
                 target_mean=None, target_std=None):
        self.d = d
        self.head_checksum = head_checksum
        self.net = VelocityModel(VelocityConfig(state_dim=N * d, cond_dim=COND_DIM, width=width, depth=depth), seed=seed)
        self.target_mean = np.zeros(N * d) if target_mean is None else np.asarray(target_mean, dtype=np.float64)
        self.target_std = np.ones(N * d) if target_std is None else np.asarray(target_std, dtype=np.float64)

    @property
    def state_dim(self) -> int:
        return N * self.d

    def to_latent(self, s_hat) -> np.ndarray:
        flat = np.asarray(s_hat, dtype=np.float64).reshape(-1, self.state_dim)
        return (flat - self.target_mean) / self.target_std

    def from_latent(self, x) -> np.ndarray:
        return (np.asarray(x) * self.target_std + self.target_mean).reshape(-1, N, self.d)

    def velocity(self, t, x, cond) -> np.ndarray:
        return self.net(t, x, cond)

    def save(self, out_dir, seed: int = 0) -> None:
        arrays = dict(self.net.params.values())
        arrays["target.mean"] = self.target_mean
        arrays["target.std"] = self.target_std
        save_checkpoint(out_dir, "planner", self.net.arch(), arrays, seed, d=self.d, head_checksum=self.head_checksum)

    @classmethod
    def load(cls, ckpt_dir) -> PlannerModel:
        meta, arrays = load_checkpoint(ckpt_dir, "planner")
        arch = meta["arch"]
        model = cls(meta["d"], meta["head_checksum"], arch["width"], arch["depth"],
                    target_mean=arrays.pop("target.mean"), target_std=arrays.pop("target.std"))
        model.net.params.set_values(arrays)
        return model


@dataclass(frozen=True)
class PlannerConfig:
    width: int = 256
    depth: int = 3
    train: TrainConfig = TrainConfig()


def condition_dropout(rng: np.random.Generator, cond: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero whole condition rows (c_g and c_d together) with probability p."""
    drop = rng.random(cond.shape[0]) < p
    out = cond.copy()
    out[drop] = 0.0
    return out, drop


def train_planner(dataset: DatasetShard, head: ProjectionHead, config: PlannerConfig = PlannerConfig()):
    """Fit the planner on frozen-head targets; returns (PlannerModel, history, dropped-per-step)."""
    if not head.frozen:
        raise ValueError("train_planner requires a frozen projection head")
    tc = config.train
    targets = project_semantics(head, dataset.semantics).reshape(dataset.count, -1)
    mean = targets.mean(axis=0).astype(np.float32).astype(np.float64)
    std = (targets.std(axis=0) + 1e-6).astype(np.float32).astype(np.float64)
    model = PlannerModel(head.d, head.checksum, config.width, config.depth, seed=tc.seed, target_mean=mean, target_std=std)
    x1_all = (targets - mean) / std
    conds = dataset.conditions
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0x91]))
    dropped = np.zeros(tc.steps, dtype=np.int64)

    def loss_fn(step):
        idx = rng.integers(dataset.count, size=tc.batch_size)
        t = sample_timestep(rng, tc.t_mu, tc.t_sigma, size=tc.batch_size)
        x0 = rng.standard_normal((tc.batch_size, model.state_dim))
        cond, drop = condition_dropout(rng, conds[idx], tc.cond_dropout)
        dropped[step - 1] = drop.sum()
        x1 = x1_all[idx]
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        return fm_loss(model.net.forward(t, Tensor(xt), Tensor(cond)), x0, x1)

    history = fit([model.net.params], loss_fn, tc, name="planner")
    model.net.params.round_to_f32()
    return model, history, dropped


def as_condition_batch(cond) -> np.ndarray:
    if isinstance(cond, PromptSpec):
        cond = encode_prompt(cond)
    if isinstance(cond, PromptCondition):
        return cond.flat()[None, :]
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 1:
        cond = cond[None, :]
    if cond.shape[1] != COND_DIM:
        raise ShapeError("condition", cond.shape, (cond.shape[0], COND_DIM))
    return cond


def guided_field(net, guidance: float):
    """Velocity closure applying classifier-free guidance against the all-zero condition."""
    if guidance == 1.0:
        return net

    def field(t, x, cond):
        return cfg_velocity(net(t, x, cond), net(t, x, np.zeros_like(cond)), guidance)

    return field


def plan_sample(model: PlannerModel, cond, steps: int = 50, guidance: float = 3.0, seed: int = 0,
                noise: np.ndarray | None = None) -> np.ndarray:
    """Sample plans [B, N, d] in head coordinates."""
    cond = as_condition_batch(cond)
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal((cond.shape[0], model.state_dim))
    x = euler_integrate(guided_field(model.net, guidance), noise, cond, SamplerConfig(steps, guidance, seed))
    return model.from_latent(x)


def check_compatible(planner: PlannerModel, synthesizer: SynthesizerModel) -> None:
    if planner.head_checksum != synthesizer.head_checksum:
        raise HeadMismatch(
            f"planner was trained against head {planner.head_checksum}, "
            f"synthesizer carries head {synthesizer.head_checksum}"
        )
    if planner.d != synthesizer.d:
        raise HeadMismatch(f"planner d={planner.d} but synthesizer d={synthesizer.d}")


def generate_end_to_end(planner: PlannerModel, synthesizer: SynthesizerModel, vae: AcousticVae, prompts,
                        seed_plan: int = 0, seed_synth: int = 1, plan_steps: int = 50, guidance: float = 3.0,
                        synth_steps: int = 25) -> np.ndarray:
    """prompt(s) -> plan -> acoustic latent -> spectrogram [B, T, C_ac]."""
    check_compatible(planner, synthesizer)
    if isinstance(prompts, (PromptSpec, PromptCondition)):
        prompts = [prompts]
    cond = np.concatenate([as_condition_batch(p) for p in prompts]) if isinstance(prompts, list) else as_condition_batch(prompts)
    plans = plan_sample(planner, cond, plan_steps, guidance, seed_plan)
    z = synth_sample(synthesizer, plans, synth_steps, 1.0, seed_synth)
    return vae_decode(synthesizer_vae_guard(vae), z)


def synthesizer_vae_guard(vae: AcousticVae) -> AcousticVae:
    if not getattr(vae, "trained", False):
        raise ValueError("autoencoder is not trained")
    return vae
