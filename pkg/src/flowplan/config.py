"""Run configuration: a flat key/value YAML file plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .acoustic import VaeConfig
from .editor import EditConfig
from .experiments import PipelineConfig
from .training import TrainConfig
from .world import Grammar

SEED_ENV = "FLOWPLAN_SEED"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


@dataclass(frozen=True)
class RunConfig:
    # paths
    data_dir: str | None = None
    out_dir: str = "runs"
    run_id: str | None = None
    seed: int = 0
    # data
    train_count: int = 8192
    heldout_count: int = 512
    decay_rate: float = 0.3
    noise_std: float = 0.01
    bench_sources: int = 50
    bench_perturbations: int = 10
    bench_keep: int = 100
    # autoencoder
    latent_channels: int = 6
    vae_hidden: int = 64
    vae_steps: int = 2000
    vae_lr: float = 2e-3
    # flow models
    d: int = 8
    head_hidden: int = 32
    width: int = 256
    depth: int = 3
    synth_train_steps: int = 20_000
    planner_train_steps: int = 20_000
    baseline_train_steps: int = 20_000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 1000
    decay_interval: int = 5000
    decay_factor: float = 0.5
    weight_decay: float = 0.01
    clip_norm: float = 0.0
    ema_decay: float = 0.0
    t_mu: float = 0.4
    t_sigma: float = 1.0
    cond_dropout: float = 0.1
    log_every: int = 1000
    # sampling
    plan_steps: int = 50
    plan_guidance: float = 3.0
    synth_steps: int = 25
    baseline_guidance: float = 3.0
    # editing
    n_avg: int = 8
    edit_steps: int = 50
    t_start: float = 0.3333
    source_cond: str = "prompt"
    # evaluation
    eval_prompts: int = 200
    ablate_dims: list = field(default_factory=lambda: [4, 8, 16])
    sample_prompts: list = field(default_factory=lambda: [[3], [1, 5], [0, 4, 7], [2, 6, 1, 3]])
    edit_source_index: int = 0
    edit_target: list = field(default_factory=lambda: [5])
    heatmaps: bool = True

    def __post_init__(self):
        if self.source_cond not in ("prompt", "null"):
            raise ConfigError("source_cond", f"must be 'prompt' or 'null', got {self.source_cond!r}")

    # ---- derived configs
    def grammar(self) -> Grammar:
        return Grammar(decay_rate=self.decay_rate, noise_std=self.noise_std)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, base_lr=self.lr, warmup_steps=self.warmup_steps,
            decay_interval=self.decay_interval, decay_factor=self.decay_factor, weight_decay=self.weight_decay,
            clip_norm=self.clip_norm, ema_decay=self.ema_decay, t_mu=self.t_mu, t_sigma=self.t_sigma,
            cond_dropout=self.cond_dropout, seed=self.seed, log_every=self.log_every,
        )

    def vae_config(self) -> VaeConfig:
        base = VaeConfig().train
        steps = self.vae_steps
        tc = replace(base, steps=steps, base_lr=self.vae_lr, seed=self.seed, log_every=self.log_every,
                     warmup_steps=min(base.warmup_steps, max(1, steps // 10)),
                     decay_interval=max(1, min(base.decay_interval, steps // 2)))
        return VaeConfig(self.latent_channels, self.vae_hidden, tc)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            seed=self.seed, d=self.d, head_hidden=self.head_hidden, width=self.width, depth=self.depth,
            train=self.train_config(), synth_train_steps=self.synth_train_steps,
            planner_train_steps=self.planner_train_steps, baseline_train_steps=self.baseline_train_steps,
            plan_steps=self.plan_steps, plan_guidance=self.plan_guidance, synth_steps=self.synth_steps,
            baseline_guidance=self.baseline_guidance,
        )

    def edit_config(self) -> EditConfig:
        return EditConfig(self.n_avg, self.edit_steps, self.t_start, self.source_cond == "prompt", self.seed + 404)

    # ---- identity and persistence
    def identity(self) -> str:
        body = {k: v for k, v in asdict(self).items() if k != "run_id"}
        return hashlib.sha1(json.dumps(body, sort_keys=True).encode()).hexdigest()[:10]

    @property
    def resolved_run_id(self) -> str:
        return self.run_id or self.identity()

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.resolved_run_id

    def require(self, key: str):
        value = getattr(self, key)
        if value in (None, ""):
            raise ConfigError(key, "is required for this subcommand")
        return value

    def dump(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=True)


_FIELDS = {f.name for f in fields(RunConfig)}


_DEFAULTS = RunConfig()


def _coerce(key: str, value):
    if value is None:
        return None
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}[value.lower()]
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            value = yaml.safe_load(value) if isinstance(value, str) else value
            if not isinstance(value, list):
                raise TypeError
            return value
    except (TypeError, ValueError, KeyError):
        raise ConfigError(key, f"cannot interpret {value!r}") from None
    return str(value)


def parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config", f"{p} must hold a key: value mapping")
        values.update(loaded)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = env[SEED_ENV]
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
