"""Acoustic side: frame autoencoder, projection head and the acoustic synthesizer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as Tn
from .checkpoint import load_checkpoint, save_checkpoint
from .flow import (
    SamplerConfig,
    VelocityConfig,
    VelocityModel,
    _no_tape,
    cfg_velocity,
    euler_integrate,
    fm_loss,
    sample_timestep,
)
from .optim import FrozenError, ParamStore
from .tensor import ShapeError, Tensor
from .training import TrainConfig, fit
from .world import C_AC, D, N, T, DatasetShard

log = logging.getLogger(__name__)

C_LAT = 6
LATENT_DIM = T * C_LAT


def _dense_stack(store: ParamStore, prefix: str, dims: list[int], rng) -> None:
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        store.add(f"{prefix}{i}.w", rng.standard_normal((a, b)) / np.sqrt(a))
        store.add(f"{prefix}{i}.b", np.zeros(b))


def _mlp(store: ParamStore, prefix: str, x, layers: int) -> Tensor:
    h = Tn.as_tensor(x)
    for i in range(layers):
        h = Tn.add_bias(Tn.matmul(h, store[f"{prefix}{i}.w"]), store[f"{prefix}{i}.b"])
        if i < layers - 1:
            h = Tn.silu(h)
    return h


# ---------------------------------------------------------------- autoencoder

class AcousticVae:
    """Deterministic per-frame autoencoder 16 -> hidden -> C_lat -> hidden -> 16.

    Latents are standardised per channel with statistics taken from the
    training set, so flow models see roughly unit-scale targets.
    """

    def __init__(self, latent_channels: int = C_LAT, hidden: int = 64, seed: int = 0):
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        _dense_stack(self.params, "enc", [C_AC, hidden, latent_channels], rng)
        _dense_stack(self.params, "dec", [latent_channels, hidden, C_AC], rng)
        self.params.add("lat.mean", np.zeros(latent_channels))
        self.params.add("lat.std", np.ones(latent_channels))
        self.trained = False

    def encode_raw(self, frames) -> Tensor:
        return _mlp(self.params, "enc", frames, 2)

    def decode_raw(self, latents) -> Tensor:
        return _mlp(self.params, "dec", latents, 2)

    def arch(self) -> dict:
        return {"latent_channels": self.latent_channels, "hidden": self.hidden}

    def save(self, out_dir, seed: int = 0, **extra) -> None:
        save_checkpoint(out_dir, "vae", self.arch(), self.params.values(), seed, trained=self.trained, **extra)

    @classmethod
    def load(cls, ckpt_dir) -> AcousticVae:
        meta, arrays = load_checkpoint(ckpt_dir, "vae")
        vae = cls(**meta["arch"])
        vae.params.set_values(arrays)
        vae.trained = bool(meta.get("trained", True))
        vae.params.freeze()
        return vae


def vae_encode(vae: AcousticVae, clip) -> np.ndarray:
    spec = np.asarray(getattr(clip, "spectrogram", clip), dtype=np.float64)
    if spec.shape[-1] != C_AC:
        raise ShapeError("vae_encode", spec.shape, (T, C_AC))
    with _no_tape():
        raw = vae.encode_raw(Tensor(spec.reshape(-1, C_AC))).data
    p = vae.params
    z = (raw - p["lat.mean"].data) / p["lat.std"].data
    return z.reshape(spec.shape[:-1] + (vae.latent_channels,))


def vae_decode(vae: AcousticVae, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != vae.latent_channels:
        if z.shape[-1] == T * vae.latent_channels:
            z = z.reshape(z.shape[:-1] + (T, vae.latent_channels))
        else:
            raise ShapeError("vae_decode", z.shape, (T, vae.latent_channels))
    p = vae.params
    raw = z * p["lat.std"].data + p["lat.mean"].data
    with _no_tape():
        out = vae.decode_raw(Tensor(raw.reshape(-1, vae.latent_channels))).data
    return out.reshape(z.shape[:-1] + (C_AC,))


@dataclass(frozen=True)
class VaeConfig:
    latent_channels: int = C_LAT
    hidden: int = 64
    train: TrainConfig = TrainConfig(steps=2000, batch_size=32, base_lr=2e-3, warmup_steps=200, decay_interval=1000)


def train_vae(dataset: DatasetShard, config: VaeConfig = VaeConfig()) -> tuple[AcousticVae, np.ndarray]:
    """Fit the frame autoencoder by MSE, then freeze it; returns (vae, loss history)."""
    tc = config.train
    vae = AcousticVae(config.latent_channels, config.hidden, seed=tc.seed)
    frames = dataset.spectrograms.reshape(-1, T, C_AC)
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0xAE]))
    train_store = _subset_store(vae.params, exclude=("lat.mean", "lat.std"))

    def loss_fn(step):
        idx = rng.integers(len(frames), size=tc.batch_size)
        x = frames[idx].reshape(-1, C_AC)
        recon = vae.decode_raw(vae.encode_raw(Tensor(x)))
        diff = Tn.sub(recon, Tensor(x))
        return Tn.mean(Tn.mul(diff, diff))

    history = fit([train_store], loss_fn, tc, name="vae")
    with _no_tape():
        raw = vae.encode_raw(Tensor(frames.reshape(-1, C_AC))).data
    vae.params.set_values({"lat.mean": raw.mean(axis=0), "lat.std": raw.std(axis=0) + 1e-6})
    vae.params.round_to_f32()
    vae.trained = True
    vae.params.freeze()
    return vae, history


class _subset_store(ParamStore):
    """View over some parameters of another store, with its own optimiser state."""

    def __init__(self, base: ParamStore, exclude=()):
        super().__init__()
        for name, t in base.params.items():
            if name in exclude:
                t.requires_grad = False
                continue
            self.params[name] = t
            self.grads[name] = None
            self.m[name] = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)


def vae_recon_mse(vae: AcousticVae, spectrograms) -> float:
    spec = np.asarray(spectrograms, dtype=np.float64)
    return float(np.mean((vae_decode(vae, vae_encode(vae, spec)) - spec) ** 2))


# ---------------------------------------------------------------- projection head

class ProjectionHead:
    """Per-frame two-layer perceptron D -> hidden -> d; immutable once frozen."""

    def __init__(self, d: int = 8, hidden: int = 32, in_dim: int = D, seed: int = 0):
        # at most half the feature width, so the largest ablation dim (16 of 32) is allowed
        if not 0 < d <= in_dim // 2:
            raise ValueError(f"projection dim d={d} must satisfy 0 < d <= {in_dim // 2}")
        self.d = d
        self.hidden = hidden
        self.in_dim = in_dim
        self.params = ParamStore()
        _dense_stack(self.params, "proj", [in_dim, hidden, d], np.random.default_rng(seed))

    @property
    def frozen(self) -> bool:
        return self.params.frozen

    def freeze(self) -> str:
        if not self.frozen:
            self.params.round_to_f32()
            self.params.freeze()
        return self.checksum

    @property
    def checksum(self) -> str:
        return self.params.checksum()

    def forward(self, s) -> Tensor:
        s = Tn.as_tensor(s)
        if s.shape[-1] != self.in_dim:
            raise ShapeError("project_semantics", s.shape, (N, self.in_dim))
        return _mlp(self.params, "proj", s, 2)

    def set_values(self, values) -> None:
        if self.frozen:
            raise FrozenError("projection head is frozen")
        self.params.set_values(values)

    def arch(self) -> dict:
        return {"d": self.d, "hidden": self.hidden, "in_dim": self.in_dim}

    def save(self, out_dir, seed: int = 0) -> None:
        save_checkpoint(out_dir, "head", self.arch(), self.params.values(), seed,
                        frozen=self.frozen, head_checksum=self.checksum)

    @classmethod
    def load(cls, ckpt_dir) -> ProjectionHead:
        meta, arrays = load_checkpoint(ckpt_dir, "head")
        head = cls(**meta["arch"])
        head.params.set_values(arrays)
        if meta.get("frozen"):
            head.params.freeze()
        return head


def project_semantics(head: ProjectionHead, s) -> np.ndarray:
    """[..., N, D] -> [..., N, d], applied frame by frame."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != head.in_dim:
        raise ShapeError("project_semantics", s.shape, (N, head.in_dim))
    with _no_tape():
        out = head.forward(Tensor(s.reshape(-1, head.in_dim))).data
    return out.reshape(s.shape[:-1] + (head.d,))


# ---------------------------------------------------------------- synthesizer

class SynthesizerModel:
    def __init__(self, head: ProjectionHead, width: int = 256, depth: int = 3, latent_channels: int = C_LAT, seed: int = 0):
        self.head = head
        self.latent_channels = latent_channels
        self.net = VelocityModel(
            VelocityConfig(state_dim=T * latent_channels, cond_dim=N * head.d, width=width, depth=depth), seed=seed
        )

    @property
    def d(self) -> int:
        return self.head.d

    @property
    def head_checksum(self) -> str:
        return self.head.checksum

    def save(self, out_dir, seed: int = 0) -> None:
        save_checkpoint(out_dir, "synthesizer", self.net.arch(), self.net.params.values(), seed,
                        d=self.d, head_checksum=self.head_checksum, latent_channels=self.latent_channels)
        self.head.save(f"{out_dir}/head", seed)

    @classmethod
    def load(cls, ckpt_dir) -> SynthesizerModel:
        meta, arrays = load_checkpoint(ckpt_dir, "synthesizer")
        head = ProjectionHead.load(f"{ckpt_dir}/head")
        if head.checksum != meta["head_checksum"]:
            raise ValueError(f"head in {ckpt_dir} does not match the synthesizer's recorded checksum")
        model = cls(head, meta["arch"]["width"], meta["arch"]["depth"], meta["latent_channels"])
        model.net.params.set_values(arrays)
        return model


@dataclass(frozen=True)
class SynthConfig:
    d: int = 8
    head_hidden: int = 32
    width: int = 256
    depth: int = 3
    train: TrainConfig = TrainConfig()


def train_synthesizer(dataset: DatasetShard, vae: AcousticVae, config: SynthConfig = SynthConfig()):
    """Jointly fit the synthesizer and projection head, then freeze the head.

    Returns (SynthesizerModel, frozen head, loss history).
    """
    if not getattr(vae, "trained", False):
        raise ValueError("train_synthesizer needs a trained autoencoder")
    tc = config.train
    head = ProjectionHead(config.d, config.head_hidden, seed=tc.seed + 1)
    model = SynthesizerModel(head, config.width, config.depth, vae.latent_channels, seed=tc.seed)
    z1_all = vae_encode(vae, dataset.spectrograms).reshape(dataset.count, -1)
    sem = dataset.semantics
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0x5E]))

    def loss_fn(step):
        idx = rng.integers(dataset.count, size=tc.batch_size)
        t = sample_timestep(rng, tc.t_mu, tc.t_sigma, size=tc.batch_size)
        z0 = rng.standard_normal((tc.batch_size, z1_all.shape[1]))
        z1 = z1_all[idx]
        s_hat = Tn.reshape(head.forward(Tensor(sem[idx].reshape(-1, D))), (tc.batch_size, N * head.d))
        zt = (1.0 - t)[:, None] * z0 + t[:, None] * z1
        return fm_loss(model.net.forward(t, Tensor(zt), s_hat), z0, z1)

    history = fit([model.net.params, head.params], loss_fn, tc, name="synth")
    model.net.params.round_to_f32()
    head.freeze()
    return model, head, history


def synth_sample(model: SynthesizerModel, s_hat, steps: int = 25, guidance: float = 1.0, seed: int = 0,
                 noise: np.ndarray | None = None) -> np.ndarray:
    """Generate standardised acoustic latents [B, T, C_lat] from plans [B, N, d]."""
    s_hat = np.asarray(s_hat, dtype=np.float64)
    single = s_hat.ndim == 2 and s_hat.shape == (N, model.d)
    cond = s_hat.reshape(1 if single else s_hat.shape[0], -1)
    if cond.shape[1] != N * model.d:
        raise ShapeError("synth_sample", s_hat.shape, (N, model.d))
    batch = cond.shape[0]
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal((batch, model.net.config.state_dim))
    field = _guided_field(model.net, guidance)
    z = euler_integrate(field, noise, cond, SamplerConfig(steps, guidance, seed))
    z = z.reshape(batch, T, model.latent_channels)
    return z[0] if single else z


def _guided_field(net: VelocityModel, guidance: float):
    if guidance == 1.0:
        return net

    def field(t, x, cond):
        return cfg_velocity(net(t, x, cond), net(t, x, np.zeros_like(cond)), guidance)

    return field


def synthesize_spectrogram(model, vae, s_hat, steps: int = 25, guidance: float = 1.0, seed: int = 0) -> np.ndarray:
    return vae_decode(vae, synth_sample(model, s_hat, steps, guidance, seed))


def with_train(cfg, **overrides):
    """Return ``cfg`` with fields of its nested TrainConfig replaced."""
    return replace(cfg, train=replace(cfg.train, **overrides))
