"""Experiment harness for the two-stage flow pipeline.

Usage: ``flowplan <subcommand> --config run.yaml [overrides]``.

Every subcommand writes into ``<out_dir>/<run_id>/<subcommand>/``: a config
snapshot, any checkpoints, ``report.json`` and ``report.csv``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import world as W
from .acoustic import AcousticVae, SynthesizerModel, train_vae, vae_recon_mse
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, parse_overrides
from .editor import edit_semantics, source_plan
from .experiments import (
    ABLATE_COLUMNS,
    EDIT_COLUMNS,
    GEN_COLUMNS,
    BaselineModel,
    TwoStage,
    ablate_d,
    benchmark_sources,
    matched_baseline_width,
    run_editing_eval,
    run_generation_eval,
    synth_reconstruction,
    train_baseline,
    two_stage_parameter_count,
    write_report,
)
from .metrics import alignment_from_events
from .planner import PlannerModel, check_compatible, generate_end_to_end, train_planner
from .acoustic import synth_sample, train_synthesizer, vae_decode
from .viz import save_heatmap

log = logging.getLogger("flowplan")

SUBCOMMANDS = {
    "gen-data": "generate train/held-out shards and the hard editing benchmark",
    "train-vae": "train the frame autoencoder",
    "train-synth": "jointly train the acoustic synthesizer and projection head, then freeze the head",
    "train-planner": "train the semantic planner against the frozen head",
    "train-baseline": "train the parameter-matched single-stage baseline",
    "sample": "generate spectrograms for the configured prompts",
    "edit": "edit one held-out clip toward a target prompt",
    "eval-gen": "two-stage vs baseline generation metrics on held-out prompts",
    "eval-edit": "editing metrics on the hard benchmark",
    "ablate": "train and evaluate the pipeline for each projection dimension",
}

DATA_COLUMNS = ["run_id", "split", "count", "seed", "decode_accuracy"]
TRAIN_COLUMNS = ["run_id", "stage", "d", "seed", "steps", "params", "loss_first", "loss_last", "metric", "value"]
SAMPLE_COLUMNS = ["run_id", "index", "tokens", "decoded", "set_f1", "order_accuracy"]
EDIT_ONE_COLUMNS = ["run_id", "source_index", "mode", "source_tokens", "target_tokens", "decoded", "target_f1"]


class CliError(RuntimeError):
    pass


def _tokens(seq) -> str:
    return " ".join(str(int(k)) for k in seq)


def _stage_dir(cfg: RunConfig, name: str) -> Path:
    out = cfg.run_dir / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    return out


def _data(cfg: RunConfig, split: str) -> W.DatasetShard:
    path = Path(cfg.require("data_dir")) / split
    if not (path / "meta.json").exists():
        raise CliError(f"dataset split missing: {path} (run gen-data first or fix 'data_dir')")
    return W.load_dataset(path)


def _need(path: Path, what: str) -> Path:
    if not (path / "model.json").exists():
        raise CliError(f"missing {what} checkpoint at {path}")
    return path


def _vae(cfg):
    return AcousticVae.load(_need(cfg.run_dir / "train-vae", "autoencoder"))


def _synth(cfg):
    return SynthesizerModel.load(_need(cfg.run_dir / "train-synth", "synthesizer"))


def _planner(cfg):
    return PlannerModel.load(_need(cfg.run_dir / "train-planner", "planner"))


def _baseline(cfg):
    return BaselineModel.load(_need(cfg.run_dir / "train-baseline", "baseline"))


def _loss_summary(history: np.ndarray) -> tuple[float, float]:
    k = max(1, min(1000, len(history) // 10))
    return float(history[:k].mean()), float(history[-k:].mean())


def _train_row(cfg, stage, steps, params, history, metric, value, d=0):
    first, last = _loss_summary(history)
    return {"run_id": cfg.resolved_run_id, "stage": stage, "d": d, "seed": cfg.seed, "steps": steps,
            "params": params, "loss_first": first, "loss_last": last, "metric": metric, "value": float(value)}


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(cfg: RunConfig, args) -> None:
    root = Path(cfg.require("data_dir"))
    grammar = cfg.grammar()
    rows = []
    shards = {}
    for split, count, seed in (("train", cfg.train_count, cfg.seed), ("heldout", cfg.heldout_count, cfg.seed + 1)):
        shard = W.generate_dataset(count, seed, grammar, root / split, force=args.force)
        shards[split] = shard
        acc = np.mean([W.oracle_decode_events(s) == list(p.tokens) for s, p in zip(shard.spectrograms, shard.prompts)])
        rows.append({"run_id": cfg.resolved_run_id, "split": split, "count": count, "seed": seed,
                     "decode_accuracy": float(acc)})
    heldout = shards["heldout"]
    n_src = min(cfg.bench_sources, heldout.count)
    pairs = W.build_hard_benchmark(benchmark_sources(heldout, n_src), cfg.bench_perturbations,
                                   min(cfg.bench_keep, n_src * cfg.bench_perturbations), seed=cfg.seed)
    W.save_benchmark(pairs, root / "benchmark.json")
    write_report(rows, DATA_COLUMNS, _stage_dir(cfg, "gen-data"))


def cmd_train_vae(cfg, args) -> None:
    train, heldout = _data(cfg, "train"), _data(cfg, "heldout")
    vae, history = train_vae(train, cfg.vae_config())
    out = _stage_dir(cfg, "train-vae")
    vae.save(out, cfg.seed)
    rows = [
        _train_row(cfg, "vae", cfg.vae_steps, vae.params.count(), history, "train_mse", vae_recon_mse(vae, train.spectrograms[:512])),
        _train_row(cfg, "vae", cfg.vae_steps, vae.params.count(), history, "heldout_mse", vae_recon_mse(vae, heldout.spectrograms)),
    ]
    write_report(rows, TRAIN_COLUMNS, out)


def cmd_train_synth(cfg, args) -> None:
    train, heldout = _data(cfg, "train"), _data(cfg, "heldout")
    vae = _vae(cfg)
    synth, head, history = train_synthesizer(train, vae, cfg.pipeline().synth_config())
    out = _stage_dir(cfg, "train-synth")
    synth.save(out, cfg.seed)
    gen, recon = synth_reconstruction(synth, vae, heldout, cfg.eval_prompts, cfg.seed + 303, cfg.synth_steps)
    params = synth.net.params.count() + head.params.count()
    rows = [_train_row(cfg, "synth", cfg.synth_train_steps, params, history, k, v, cfg.d) for k, v in recon.items()]
    write_report(rows, TRAIN_COLUMNS, out)
    if cfg.heatmaps:
        for i in range(min(4, len(gen))):
            save_heatmap(out / f"resynth_{i}.png", gen[i], reference=heldout.spectrograms[i])


def cmd_train_planner(cfg, args) -> None:
    train = _data(cfg, "train")
    synth = _synth(cfg)
    planner, history, dropped = train_planner(train, synth.head, cfg.pipeline().planner_config())
    out = _stage_dir(cfg, "train-planner")
    planner.save(out, cfg.seed)
    rate = float(dropped.sum()) / (len(dropped) * cfg.batch_size)
    rows = [_train_row(cfg, "planner", cfg.planner_train_steps, planner.net.params.count(), history,
                       "cond_dropout_rate", rate, cfg.d)]
    write_report(rows, TRAIN_COLUMNS, out)


def cmd_train_baseline(cfg, args) -> None:
    train = _data(cfg, "train")
    vae = _vae(cfg)
    target = two_stage_parameter_count(cfg.d, cfg.width, cfg.depth, cfg.head_hidden, cfg.latent_channels)
    width = matched_baseline_width(target, cfg.depth, cfg.latent_channels)
    model, history = train_baseline(train, vae, width, cfg.depth, cfg.pipeline().baseline_train())
    out = _stage_dir(cfg, "train-baseline")
    model.save(out, cfg.seed)
    count = model.net.params.count()
    rows = [_train_row(cfg, "baseline", cfg.baseline_train_steps, count, history, "param_ratio", count / target)]
    write_report(rows, TRAIN_COLUMNS, out)


def cmd_sample(cfg, args) -> None:
    vae, synth, planner = _vae(cfg), _synth(cfg), _planner(cfg)
    prompts = [W.PromptSpec(tuple(p)) for p in cfg.sample_prompts]
    pc = cfg.pipeline()
    specs = generate_end_to_end(planner, synth, vae, prompts, cfg.seed + 101, cfg.seed + 202,
                                pc.plan_steps, pc.plan_guidance, pc.synth_steps)
    out = _stage_dir(cfg, "sample")
    rows = []
    for i, (spec, p) in enumerate(zip(specs, prompts)):
        decoded = W.oracle_decode_events(spec)
        f1, order = alignment_from_events(decoded, p)
        rows.append({"run_id": cfg.resolved_run_id, "index": i, "tokens": _tokens(p.tokens),
                     "decoded": _tokens(decoded), "set_f1": f1, "order_accuracy": order})
        if cfg.heatmaps:
            save_heatmap(out / f"sample_{i}.png", spec)
    np.save(out / "spectrograms.npy", specs.astype(np.float32))
    write_report(rows, SAMPLE_COLUMNS, out)


def cmd_edit(cfg, args) -> None:
    heldout = _data(cfg, "heldout")
    vae, synth, planner = _vae(cfg), _synth(cfg), _planner(cfg)
    check_compatible(planner, synth)
    i = cfg.edit_source_index
    if not 0 <= i < heldout.count:
        raise ConfigError("edit_source_index", f"{i} outside held-out range 0..{heldout.count - 1}")
    source = heldout.prompts[i]
    target = W.PromptSpec(tuple(cfg.edit_target))
    ecfg = cfg.edit_config()
    s_src = source_plan(synth, heldout.spectrograms[i])
    c_src = W.encode_prompt(source) if ecfg.conditional_source else None
    s_edit = edit_semantics(planner, s_src, W.encode_prompt(target), c_src, ecfg)
    spec = vae_decode(vae, synth_sample(synth, s_edit, cfg.synth_steps, 1.0, ecfg.seed + 1))
    out = _stage_dir(cfg, "edit")
    decoded = W.oracle_decode_events(spec)
    rows = [{"run_id": cfg.resolved_run_id, "source_index": i, "mode": cfg.source_cond,
             "source_tokens": _tokens(source.tokens), "target_tokens": _tokens(target.tokens),
             "decoded": _tokens(decoded), "target_f1": alignment_from_events(decoded, target)[0]}]
    if cfg.heatmaps:
        save_heatmap(out / "source.png", heldout.spectrograms[i])
        save_heatmap(out / "edited.png", spec)
    write_report(rows, EDIT_ONE_COLUMNS, out)


def cmd_eval_gen(cfg, args) -> None:
    heldout = _data(cfg, "heldout")
    vae, synth, planner, baseline = _vae(cfg), _synth(cfg), _planner(cfg), _baseline(cfg)
    rows, clips = run_generation_eval(TwoStage(synth, planner), vae, baseline, heldout, cfg.pipeline(),
                                      cfg.eval_prompts, cfg.resolved_run_id)
    out = _stage_dir(cfg, "eval-gen")
    write_report(rows, GEN_COLUMNS, out)
    if cfg.heatmaps:
        for name, specs in clips.items():
            save_heatmap(out / f"{name}_0.png", specs[0])


def cmd_eval_edit(cfg, args) -> None:
    heldout = _data(cfg, "heldout")
    bench = Path(cfg.require("data_dir")) / "benchmark.json"
    if not bench.exists():
        raise CliError(f"missing editing benchmark {bench} (run gen-data first)")
    pairs = W.load_benchmark(bench)
    vae, synth, planner = _vae(cfg), _synth(cfg), _planner(cfg)
    check_compatible(planner, synth)
    rows, clips = run_editing_eval(TwoStage(synth, planner), vae, heldout, pairs, cfg.edit_config(), cfg.pipeline(),
                                   cfg.bench_sources, cfg.resolved_run_id)
    out = _stage_dir(cfg, "eval-edit")
    write_report(rows, EDIT_COLUMNS, out)
    if cfg.heatmaps:
        for name, specs in clips.items():
            save_heatmap(out / f"{name}_0.png", specs[0])


def cmd_ablate(cfg, args) -> None:
    train, heldout = _data(cfg, "train"), _data(cfg, "heldout")
    vae = _vae(cfg)
    rows, trained = ablate_d(train, heldout, vae, cfg.pipeline(), tuple(cfg.ablate_dims), cfg.eval_prompts,
                             cfg.resolved_run_id)
    out = _stage_dir(cfg, "ablate")
    for d, ts in trained.items():
        ts.synthesizer.save(out / f"d{d}" / "synth", cfg.seed)
        ts.planner.save(out / f"d{d}" / "planner", cfg.seed)
    write_report(rows, ABLATE_COLUMNS, out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vae": cmd_train_vae,
    "train-synth": cmd_train_synth,
    "train-planner": cmd_train_planner,
    "train-baseline": cmd_train_baseline,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "eval-gen": cmd_eval_gen,
    "eval-edit": cmd_eval_edit,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    epilog = "subcommands:\n" + "\n".join(f"  {k:<15} {v}" for k, v in SUBCOMMANDS.items())
    parser = _Parser(prog="flowplan", description=__doc__.splitlines()[0], epilog=epilog,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    for name, help_text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", "-c", help="YAML file of key: value settings")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--data-dir", dest="data_dir")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--run-id", dest="run_id")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="overwrite an existing dataset directory")
        p.add_argument("--quiet", action="store_true")
        if name in ("edit", "eval-edit"):
            p.add_argument("--n-avg", dest="n_avg", type=int)
            p.add_argument("--edit-steps", dest="edit_steps", type=int)
            p.add_argument("--t-start", dest="t_start", type=float)
            p.add_argument("--source-cond", dest="source_cond", choices=["prompt", "null"])
    return parser


_FLAG_KEYS = ("data_dir", "out_dir", "run_id", "seed", "n_avg", "edit_steps", "t_start", "source_cond")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 2
        overrides = parse_overrides(args.set)
        overrides.update({k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k, None) is not None})
        cfg = load_config(args.config, overrides)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        COMMANDS[args.command](cfg, args)
    except (CliError, ConfigError, CheckpointError, FileExistsError, ValueError) as exc:
        print(f"flowplan: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
