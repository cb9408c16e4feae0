"""Acceptance criteria at full desk scale.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts.  Trained models are built once per session; set
``FLOWPLAN_ACCEPTANCE_CACHE`` to a directory to keep the checkpoints between
runs.  The whole module takes roughly 45 minutes on one CPU core.
"""

import json
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from flowplan import acoustic as A
from flowplan import cli
from flowplan import experiments as X
from flowplan import planner as P
from flowplan import tensor as Tn
from flowplan import world as W
from flowplan.config import RunConfig
from flowplan.editor import edit_semantics, source_plan
from flowplan.flow import (
    SamplerConfig,
    VelocityConfig,
    VelocityModel,
    euler_integrate,
    fm_loss,
    sample_timestep,
)
from flowplan.metrics import FeatureStats, frechet_distance, inception_score, is_analog, kl_divergence
from flowplan.tensor import Tensor

from conftest import record
from oracles import gradient_check, single_point_rmse, train_point_model

# pinned tolerances
GRAD_RTOL = 1e-4
FM_RMSE = 0.05
FM_LAND = 0.1
MEDIAN, MEDIAN_TOL = 0.5987, 0.02
FD_TOL, KL_TOL = 1e-6, 1e-3
F1_FLOOR = 0.7
RECON_SLACK = 0.02
EDIT_GAIN, MODE_GAP = 0.15, 0.05

SEEDS = (0, 1, 2)
ABLATE = (4, 8, 16)
CACHE = os.environ.get("FLOWPLAN_ACCEPTANCE_CACHE")


def _cached(name, train, load, save):
    if CACHE is None:
        return train()
    path = Path(CACHE) / name
    if (path / "model.json").exists():
        return load(path)
    model = train()
    save(model, path)
    return model


# ---------------------------------------------------------------- 1. autodiff

def _randomise(store, rng, scale=0.4):
    store.set_values({k: rng.standard_normal(v.shape) * scale for k, v in store.values().items()})


def _velocity_case(seed):
    rng = np.random.default_rng(seed)
    m = VelocityModel(VelocityConfig(6, 5, width=8, depth=3), seed=seed)
    _randomise(m.params, rng)
    x0, x1, c, t = (rng.standard_normal((4, 6)), rng.standard_normal((4, 6)), rng.standard_normal((4, 5)),
                    sample_timestep(rng, size=4))
    xt = (1 - t)[:, None] * x0 + t[:, None] * x1
    return [m.params], lambda: fm_loss(m.forward(t, Tensor(xt), Tensor(c)), x0, x1)


def _vae_case(seed):
    rng = np.random.default_rng(seed)
    vae = A.AcousticVae(latent_channels=3, hidden=6, seed=seed)
    _randomise(vae.params, rng)
    vae.params.set_values({"lat.mean": np.zeros(3), "lat.std": np.ones(3)})
    x = rng.random((4, W.C_AC))

    def loss():
        d = Tn.sub(vae.decode_raw(vae.encode_raw(Tensor(x))), Tensor(x))
        return Tn.mean(Tn.mul(d, d))

    return [vae.params], loss


def _joint_case(seed):
    rng = np.random.default_rng(seed)
    head = A.ProjectionHead(2, 4, seed=seed)
    synth = A.SynthesizerModel(head, width=6, depth=2, latent_channels=1, seed=seed)
    _randomise(synth.net.params, rng)
    _randomise(head.params, rng)
    sem, x0, x1 = rng.standard_normal((2 * W.N, W.D)), rng.standard_normal((2, W.T)), rng.standard_normal((2, W.T))
    t = sample_timestep(rng, size=2)
    xt = (1 - t)[:, None] * x0 + t[:, None] * x1

    def loss():
        s_hat = Tn.reshape(head.forward(Tensor(sem)), (2, -1))
        return fm_loss(synth.net.forward(t, Tensor(xt), s_hat), x0, x1)

    return [synth.net.params, head.params], loss


def test_criterion_1_autodiff():
    worst = {}
    for name, case in (("velocity", _velocity_case), ("autoencoder", _vae_case), ("synth+head", _joint_case)):
        errs = []
        for seed in range(10):
            stores, loss = case(seed)
            e = gradient_check(stores, loss, seed=seed, h=1e-5)
            errs.extend(v for k, v in e.items() if "lat." not in k)
        worst[name] = max(errs)
    ok = max(worst.values()) <= GRAD_RTOL
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(1, "autodiff vs central differences", ok, f"max rel err {detail} (tol {GRAD_RTOL:g})")


# ---------------------------------------------------------------- 2. analytic FM oracle

def test_criterion_2_single_point_oracle():
    a = np.random.default_rng(0).standard_normal(8)
    cond = np.array([1.0])
    # the budget allows minutes; 4k steps sits right at the tolerance, 16k clears it with margin
    model = train_point_model([a], [cond], steps=16_000, seed=0)
    rmse = single_point_rmse(model, a, cond, seed=1)
    noise = np.random.default_rng(2).standard_normal((32, a.size))
    out = euler_integrate(model, noise, np.tile(cond, (32, 1)), SamplerConfig(steps=50))
    land = float(np.linalg.norm(out - a, axis=1).max())
    ok = rmse <= FM_RMSE and land <= FM_LAND
    assert record(2, "single-datapoint flow oracle", ok,
                  f"velocity RMSE {rmse:.4f} (tol {FM_RMSE}), worst landing L2 {land:.4f} (tol {FM_LAND})")


# ---------------------------------------------------------------- 3. timestep sampler

def test_criterion_3_timestep_sampler():
    t = sample_timestep(np.random.default_rng(0), 0.4, 1.0, size=100_000)
    med = float(np.median(t))
    ok = abs(med - MEDIAN) <= MEDIAN_TOL and bool(np.all((t > 0) & (t < 1)))
    assert record(3, "logit-normal timesteps", ok, f"median {med:.4f} (target {MEDIAN} +/- {MEDIAN_TOL}), "
                  f"range ({t.min():.2e}, {t.max():.6f})")


# ---------------------------------------------------------------- 4. metrics

def test_criterion_4_metrics():
    def s1(mu, var):
        return FeatureStats(np.array([mu]), np.array([[var]]))

    fd = [frechet_distance(s1(0, 1), s1(0, 1)), frechet_distance(s1(0, 1), s1(1, 1)), frechet_distance(s1(0, 4), s1(0, 1))]
    fd_ok = all(abs(g - w) <= FD_TOL for g, w in zip(fd, (0.0, 1.0, 1.0)))
    kl = float(kl_divergence([0.9, 0.1], [0.5, 0.5]))
    kl_ok = abs(kl - (0.9 * np.log(1.8) + 0.1 * np.log(0.2))) <= KL_TOL
    rng = np.random.default_rng(0)
    scores = [inception_score(rng.dirichlet(np.full(W.K, a), size=50)) for a in (0.05, 0.5, 5.0)]
    scores.append(inception_score(np.eye(W.K)))
    bounds_ok = all(1.0 <= s <= 8.0 for s in scores)
    spec = W.build_dataset(1, 3).spectrograms
    same = is_analog(np.repeat(spec, 6, axis=0))
    ok = fd_ok and kl_ok and bounds_ok and same == 1.0
    assert record(4, "metric unit cases", ok, f"FD {[round(v, 9) for v in fd]}, KL {kl:.4f}, "
                  f"IS range [{min(scores):.3f}, {max(scores):.3f}], identical-clip IS {same!r}")


# ---------------------------------------------------------------- full-scale pipeline

@pytest.fixture(scope="module")
def data():
    return W.build_dataset(8192, 0), W.build_dataset(512, 1)


@pytest.fixture(scope="module")
def full_vae(data):
    cfg = RunConfig()
    return _cached("vae", lambda: A.train_vae(data[0], cfg.vae_config())[0], A.AcousticVae.load,
                   lambda m, p: m.save(p, 0))


@pytest.fixture(scope="module")
def pipelines(data, full_vae):
    """Two-stage pipeline and matched baseline for every seed, plus frozen-head probes."""
    train, heldout = data
    out = {}
    for seed in SEEDS:
        pc = RunConfig(seed=seed).pipeline()
        synth = _cached(f"s{seed}/synth", lambda: A.train_synthesizer(train, full_vae, pc.synth_config())[0],
                        A.SynthesizerModel.load, lambda m, p: m.save(p, seed))
        probe = A.project_semantics(synth.head, heldout.semantics[:64]).tobytes()
        checksum = synth.head.checksum
        planner = _cached(f"s{seed}/planner", lambda: P.train_planner(train, synth.head, pc.planner_config())[0],
                          P.PlannerModel.load, lambda m, p: m.save(p, seed))
        probe_after = A.project_semantics(synth.head, heldout.semantics[:64]).tobytes()
        target = X.two_stage_parameter_count(pc.d, pc.width, pc.depth, pc.head_hidden, full_vae.latent_channels)
        width = X.matched_baseline_width(target, pc.depth, full_vae.latent_channels)
        baseline = _cached(f"s{seed}/baseline",
                           lambda: X.train_baseline(train, full_vae, width, pc.depth, pc.baseline_train())[0],
                           X.BaselineModel.load, lambda m, p: m.save(p, seed))
        out[seed] = {
            "cfg": pc, "two_stage": X.TwoStage(synth, planner), "baseline": baseline, "target_params": target,
            "head_stable": probe == probe_after and checksum == synth.head.checksum,
        }
    return out


@pytest.fixture(scope="module")
def generation(pipelines, data, full_vae):
    return {seed: X.run_generation_eval(p["two_stage"], full_vae, p["baseline"], data[1], p["cfg"], 200)[0]
            for seed, p in pipelines.items()}


def test_criterion_5_two_stage_vs_baseline(pipelines, generation):
    wins, parts, floor_ok, budget_ok = 0, [], True, True
    for seed, rows in generation.items():
        two, base = rows
        assert two["model"] == "two_stage" and base["model"] == "baseline"
        wins += two["alignment_f1"] >= base["alignment_f1"]
        floor_ok &= two["alignment_f1"] >= F1_FLOOR
        p = pipelines[seed]
        ratio = p["baseline"].net.params.count() / p["target_params"]
        budget_ok &= abs(ratio - 1.0) <= 0.05
        parts.append(f"seed {seed}: {two['alignment_f1']:.3f} vs {base['alignment_f1']:.3f} (params x{ratio:.3f})")
    ok = wins >= 2 and floor_ok and budget_ok
    assert record(5, "two-stage vs matched baseline", ok,
                  f"{'; '.join(parts)}; wins {wins}/3 (need 2), floor {F1_FLOOR}")


@pytest.fixture(scope="module")
def recon_losses(pipelines, data, full_vae):
    train, heldout = data
    losses = {}
    for d in ABLATE:
        if d == pipelines[0]["cfg"].d:
            synth = pipelines[0]["two_stage"].synthesizer
        else:
            pc = RunConfig(seed=0, d=d).pipeline()
            synth = _cached(f"d{d}/synth", lambda: A.train_synthesizer(train, full_vae, pc.synth_config())[0],
                            A.SynthesizerModel.load, lambda m, p: m.save(p, 0))
        _, rec = X.synth_reconstruction(synth, full_vae, heldout, 200, seed=303, steps=25)
        losses[d] = rec
    return losses


def test_criterion_6_reconstruction_monotone(recon_losses):
    mel = {d: r["mel_analog"] for d, r in recon_losses.items()}
    ok = mel[16] <= mel[8] * (1 + RECON_SLACK) and mel[8] <= mel[4] * (1 + RECON_SLACK)
    detail = ", ".join(f"d={d} {v:.5f}" for d, v in mel.items())
    multi = ", ".join(f"{r['multiscale']:.5f}" for r in recon_losses.values())
    assert record(6, "reconstruction vs projection dim", ok,
                  f"held-out L1 {detail} (slack {RECON_SLACK:.0%}); multiscale {multi}")


@pytest.fixture(scope="module")
def editing(pipelines, data, full_vae):
    heldout = data[1]
    run = RunConfig(seed=0)
    pairs = W.build_hard_benchmark(X.benchmark_sources(heldout, run.bench_sources), run.bench_perturbations,
                                   run.bench_keep, seed=0)
    rows, _ = X.run_editing_eval(pipelines[0]["two_stage"], full_vae, heldout, pairs, run.edit_config(),
                                 pipelines[0]["cfg"], run.bench_sources)
    return pairs, {r["row"]: r for r in rows}


def test_criterion_7_editing(pipelines, editing, data):
    pairs, rows = editing
    src, cond, unc = (rows[k]["target_f1"] for k in ("source", "conditional", "unconditional"))
    # the default (prompt-sourced) edit carries the gain; the null-source row is held to it by the gap
    gain, gap = cond - src, abs(cond - unc)
    two = pipelines[0]["two_stage"]
    s_src = source_plan(two.synthesizer, data[1].spectrograms[:8])
    c = W.encode_prompts(data[1].prompts[:8])
    same = edit_semantics(two.planner, s_src, c, c, RunConfig().edit_config())
    linf = float(np.abs(same - s_src).max())
    ok = len(pairs) == 100 and gain >= EDIT_GAIN and gap <= MODE_GAP and linf == 0.0
    assert record(7, "hard-benchmark editing", ok,
                  f"source {src:.3f}, conditional {cond:.3f}, unconditional {unc:.3f}; "
                  f"gain {gain:+.3f} (need {EDIT_GAIN}; null-source gain {unc - src:+.3f}), gap {gap:.3f} (max {MODE_GAP}), identity L-inf {linf}")


def test_criterion_8_freeze_contract(pipelines):
    stable = all(p["head_stable"] for p in pipelines.values())
    try:
        P.check_compatible(pipelines[0]["two_stage"].planner, pipelines[1]["two_stage"].synthesizer)
        rejected = False
    except P.HeadMismatch:
        rejected = True
    ok = stable and rejected
    assert record(8, "frozen head contract", ok,
                  f"head projections bitwise stable across planner training: {stable}; "
                  f"cross-seed checksum mismatch rejected: {rejected}")


# ---------------------------------------------------------------- 9. determinism

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


def test_criterion_9_determinism(tmp_path, pipelines, generation, data, full_vae):
    reports = []
    for run in ("a", "b"):
        root = tmp_path / run
        common = ["--config", str(SMOKE), "--data-dir", str(root / "data"), "--out-dir", str(root / "runs"),
                  "--run-id", "det", "--quiet"]
        codes = [cli.main([cmd, *common, *(["--force"] if cmd == "gen-data" else [])]) for cmd in cli.SUBCOMMANDS]
        assert codes == [0] * len(codes)
        reports.append({cmd: (root / "runs" / "det" / cmd / "report.json").read_bytes() for cmd in cli.SUBCOMMANDS})
        shutil.rmtree(root / "data")
    differing = [cmd for cmd in cli.SUBCOMMANDS if reports[0][cmd] != reports[1][cmd]]
    # the full-scale generation report regenerated from the same checkpoints
    p = pipelines[0]
    again = X.run_generation_eval(p["two_stage"], full_vae, p["baseline"], data[1], p["cfg"], 200)[0]
    full_same = json.dumps(again) == json.dumps(generation[0])
    ok = not differing and full_same
    assert record(9, "bitwise reruns", ok, f"{len(cli.SUBCOMMANDS)} subcommands rerun, differing: {differing or 'none'}; "
                  f"full-scale generation report identical: {full_same}")
