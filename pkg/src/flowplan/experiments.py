"""Experiment runners: matched single-stage baseline, generation and editing
evaluations, the projection-dimension ablation, and report IO."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .acoustic import (
    AcousticVae,
    SynthConfig,
    SynthesizerModel,
    project_semantics,
    synth_sample,
    train_synthesizer,
    vae_decode,
    vae_encode,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .editor import EditConfig, edit_semantics, source_plan
from .flow import SamplerConfig, VelocityConfig, VelocityModel, euler_integrate, fm_loss, parameter_count, sample_timestep
from .metrics import (
    alignment_from_events,
    feature_stats,
    frechet_distance,
    is_analog,
    kl_event_divergence,
    pooled_features,
    recon_metrics,
)
from .planner import PlannerConfig, PlannerModel, condition_dropout, generate_end_to_end, guided_field, train_planner
from .tensor import Tensor
from .training import TrainConfig, fit
from .world import COND_DIM, T, DatasetShard, EditPair, encode_prompts, oracle_decode_events

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- baseline

class BaselineModel:
    """Single-stage text-to-acoustic-latent flow model."""

    def __init__(self, width: int, depth: int = 3, latent_channels: int = 6, seed: int = 0):
        self.latent_channels = latent_channels
        self.net = VelocityModel(
            VelocityConfig(state_dim=T * latent_channels, cond_dim=COND_DIM, width=width, depth=depth), seed=seed
        )

    def save(self, out_dir, seed: int = 0) -> None:
        save_checkpoint(out_dir, "baseline", self.net.arch(), self.net.params.values(), seed,
                        latent_channels=self.latent_channels)

    @classmethod
    def load(cls, ckpt_dir) -> BaselineModel:
        meta, arrays = load_checkpoint(ckpt_dir, "baseline")
        model = cls(meta["arch"]["width"], meta["arch"]["depth"], meta["latent_channels"])
        model.net.params.set_values(arrays)
        return model


def two_stage_parameter_count(d: int, width: int, depth: int, head_hidden: int = 32, latent_channels: int = 6) -> int:
    from .world import D, N

    synth = parameter_count(T * latent_channels, N * d, width, depth)
    planner = parameter_count(N * d, COND_DIM, width, depth)
    head = D * head_hidden + head_hidden + head_hidden * d + d
    return synth + planner + head


def matched_baseline_width(target: int, depth: int, latent_channels: int = 6) -> int:
    """Smallest width whose single-stage parameter count is closest to ``target``."""
    state = T * latent_channels
    best = min(range(8, 4096), key=lambda w: abs(parameter_count(state, COND_DIM, w, depth) - target))
    return best


def train_baseline(dataset: DatasetShard, vae: AcousticVae, width: int, depth: int = 3,
                   train: TrainConfig = TrainConfig()) -> tuple[BaselineModel, np.ndarray]:
    model = BaselineModel(width, depth, vae.latent_channels, seed=train.seed)
    z1_all = vae_encode(vae, dataset.spectrograms).reshape(dataset.count, -1)
    conds = dataset.conditions
    rng = np.random.default_rng(np.random.SeedSequence([train.seed, 0xBA5E]))
    dim = z1_all.shape[1]

    def loss_fn(step):
        idx = rng.integers(dataset.count, size=train.batch_size)
        t = sample_timestep(rng, train.t_mu, train.t_sigma, size=train.batch_size)
        z0 = rng.standard_normal((train.batch_size, dim))
        cond, _ = condition_dropout(rng, conds[idx], train.cond_dropout)
        z1 = z1_all[idx]
        zt = (1.0 - t)[:, None] * z0 + t[:, None] * z1
        return fm_loss(model.net.forward(t, Tensor(zt), Tensor(cond)), z0, z1)

    history = fit([model.net.params], loss_fn, train, name="baseline")
    model.net.params.round_to_f32()
    return model, history


def baseline_generate(model: BaselineModel, vae: AcousticVae, prompts, steps: int = 50, guidance: float = 3.0,
                      seed: int = 0) -> np.ndarray:
    cond = encode_prompts(prompts)
    noise = np.random.default_rng(seed).standard_normal((cond.shape[0], model.net.config.state_dim))
    z = euler_integrate(guided_field(model.net, guidance), noise, cond, SamplerConfig(steps, guidance, seed))
    return vae_decode(vae, z.reshape(cond.shape[0], T, model.latent_channels))


# ---------------------------------------------------------------- configuration of a full pipeline

@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    d: int = 8
    head_hidden: int = 32
    width: int = 256
    depth: int = 3
    train: TrainConfig = TrainConfig(base_lr=1e-3)
    synth_train_steps: int = 20_000
    planner_train_steps: int = 20_000
    baseline_train_steps: int = 20_000
    plan_steps: int = 50
    plan_guidance: float = 3.0
    synth_steps: int = 25
    baseline_guidance: float = 3.0

    def synth_config(self, d: int | None = None) -> SynthConfig:
        return SynthConfig(d or self.d, self.head_hidden, self.width, self.depth,
                           replace(self.train, steps=self.synth_train_steps, seed=self.seed))

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(self.width, self.depth, replace(self.train, steps=self.planner_train_steps, seed=self.seed + 7))

    def baseline_train(self) -> TrainConfig:
        return replace(self.train, steps=self.baseline_train_steps, seed=self.seed + 13)


@dataclass
class TwoStage:
    synthesizer: SynthesizerModel
    planner: PlannerModel
    synth_history: np.ndarray = field(repr=False, default=None)
    planner_history: np.ndarray = field(repr=False, default=None)


def train_two_stage(dataset: DatasetShard, vae: AcousticVae, cfg: PipelineConfig, d: int | None = None) -> TwoStage:
    synth, head, sh = train_synthesizer(dataset, vae, cfg.synth_config(d))
    planner, ph, _ = train_planner(dataset, head, cfg.planner_config())
    return TwoStage(synth, planner, sh, ph)


# ---------------------------------------------------------------- reports

GEN_COLUMNS = ["run_id", "model", "d", "seed", "train_steps", "prompts",
               "alignment_f1", "order_accuracy", "fd", "kl", "is_analog"]
EDIT_COLUMNS = ["run_id", "row", "d", "seed", "n_avg", "pairs", "target_f1", "order_accuracy", "fd", "is_analog"]
ABLATE_COLUMNS = ["run_id", "d", "seed", "alignment_f1", "order_accuracy", "mel_analog", "multiscale",
                  "synth_event_accuracy"]


def _finite_row(row: dict) -> dict:
    for k, v in row.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise ValueError(f"report value {k}={v} is not finite")
    return row


def write_report(rows: list[dict], columns: list[str], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [_finite_row({c: r[c] for c in columns}) for r in rows]
    (out / "report.json").write_text(json.dumps({"columns": columns, "rows": rows}, indent=2) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([f"{r[c]:.6g}" if isinstance(r[c], float) else r[c] for c in columns])


def read_report(out_dir) -> dict:
    return json.loads((Path(out_dir) / "report.json").read_text())


# ---------------------------------------------------------------- generation

def clip_metrics(generated, reference, prompts) -> dict:
    f1, order = zip(*(alignment_from_events(oracle_decode_events(g), p) for g, p in zip(generated, prompts)))
    return {
        "alignment_f1": float(np.mean(f1)),
        "order_accuracy": float(np.mean(order)),
        "fd": frechet_distance(feature_stats(pooled_features(reference)), feature_stats(pooled_features(generated))),
        "kl": kl_event_divergence(reference, generated),
        "is_analog": is_analog(generated),
    }


def run_generation_eval(two_stage: TwoStage, vae: AcousticVae, baseline: BaselineModel | None, heldout: DatasetShard,
                        cfg: PipelineConfig, n_prompts: int = 200, run_id: str = "") -> tuple[list[dict], dict]:
    """One clip per held-out prompt per model; returns (report rows, generated clips by model)."""
    n = min(n_prompts, heldout.count)
    prompts = heldout.prompts[:n]
    reference = heldout.spectrograms[:n]
    clips = {
        "two_stage": generate_end_to_end(
            two_stage.planner, two_stage.synthesizer, vae, prompts,
            seed_plan=cfg.seed + 101, seed_synth=cfg.seed + 202,
            plan_steps=cfg.plan_steps, guidance=cfg.plan_guidance, synth_steps=cfg.synth_steps,
        )
    }
    if baseline is not None:
        clips["baseline"] = baseline_generate(baseline, vae, prompts, cfg.plan_steps, cfg.baseline_guidance, cfg.seed + 101)
    steps = {"two_stage": cfg.synth_train_steps + cfg.planner_train_steps, "baseline": cfg.baseline_train_steps}
    rows = []
    for name, gen in clips.items():
        rows.append({"run_id": run_id, "model": name, "d": cfg.d, "seed": cfg.seed, "train_steps": steps[name],
                     "prompts": n, **clip_metrics(gen, reference, prompts)})
    return rows, clips


def synth_reconstruction(synth: SynthesizerModel, vae: AcousticVae, heldout: DatasetShard, n: int = 200,
                         seed: int = 0, steps: int = 25) -> tuple[np.ndarray, dict]:
    """Resynthesise held-out clips from their true projected semantics."""
    n = min(n, heldout.count)
    s_hat = project_semantics(synth.head, heldout.semantics[:n])
    gen = vae_decode(vae, synth_sample(synth, s_hat, steps, 1.0, seed))
    ref = heldout.spectrograms[:n]
    mel, multi = recon_metrics(ref, gen)
    acc = float(np.mean([oracle_decode_events(g) == list(p.tokens) for g, p in zip(gen, heldout.prompts[:n])]))
    return gen, {"mel_analog": mel, "multiscale": multi, "synth_event_accuracy": acc}


# ---------------------------------------------------------------- editing

def benchmark_sources(heldout: DatasetShard, n: int = 50) -> list[tuple[int, object]]:
    return [(i, heldout.prompts[i]) for i in range(n)]


def run_editing_eval(two_stage: TwoStage, vae: AcousticVae, heldout: DatasetShard, pairs: list[EditPair],
                     edit: EditConfig, cfg: PipelineConfig, n_sources: int = 50, run_id: str = "") -> tuple[list[dict], dict]:
    """Edit each benchmark pair with and without the source prompt; report target-prompt agreement."""
    if len(pairs) != 100:
        log.warning("editing benchmark has %d pairs, expected 100", len(pairs))
    planner, synth = two_stage.planner, two_stage.synthesizer
    src_idx = [p.source_index for p in pairs]
    source_specs = heldout.spectrograms[src_idx]
    targets = [p.target for p in pairs]
    s_src = source_plan(synth, source_specs)
    c_tgt = encode_prompts(targets)
    c_src = encode_prompts([p.source for p in pairs])
    clips = {"source": source_specs}
    for name, cs in (("conditional", c_src), ("unconditional", None)):
        s_edit = edit_semantics(planner, s_src, c_tgt, cs, replace(edit, conditional_source=cs is not None))
        clips[name] = vae_decode(vae, synth_sample(synth, s_edit, cfg.synth_steps, 1.0, edit.seed + 1))
    # balanced reference: the benchmark's source clips plus as many disjoint held-out clips
    ref_idx = list(range(n_sources)) + list(range(n_sources, min(2 * n_sources, heldout.count)))
    ref_stats = feature_stats(pooled_features(heldout.spectrograms[ref_idx]))
    rows = []
    for name, gen in clips.items():
        f1, order = zip(*(alignment_from_events(oracle_decode_events(g), p) for g, p in zip(gen, targets)))
        rows.append({
            "run_id": run_id, "row": name, "d": planner.d, "seed": cfg.seed, "n_avg": edit.n_avg, "pairs": len(pairs),
            "target_f1": float(np.mean(f1)), "order_accuracy": float(np.mean(order)),
            "fd": frechet_distance(ref_stats, feature_stats(pooled_features(gen))),
            "is_analog": is_analog(gen),
        })
    return rows, clips


# ---------------------------------------------------------------- ablation

def ablate_d(dataset: DatasetShard, heldout: DatasetShard, vae: AcousticVae, cfg: PipelineConfig,
             dims=(4, 8, 16), n_eval: int = 200, run_id: str = "", trained: dict | None = None) -> tuple[list[dict], dict]:
    """Train synthesizer + planner per d with fixed seeds; report alignment and reconstruction."""
    trained = dict(trained or {})
    rows = []
    for d in dims:
        if d not in trained:
            trained[d] = train_two_stage(dataset, vae, cfg, d)
        ts = trained[d]
        _, recon = synth_reconstruction(ts.synthesizer, vae, heldout, n_eval, seed=cfg.seed + 303, steps=cfg.synth_steps)
        gen_cfg = replace(cfg, d=d)
        gen_rows, _ = run_generation_eval(ts, vae, None, heldout, gen_cfg, n_eval)
        rows.append({"run_id": run_id, "d": d, "seed": cfg.seed,
                     "alignment_f1": gen_rows[0]["alignment_f1"], "order_accuracy": gen_rows[0]["order_accuracy"],
                     **recon})
    return rows, trained
