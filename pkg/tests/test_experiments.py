import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowplan import experiments as X
from flowplan.flow import parameter_count
from flowplan.world import COND_DIM, T


@given(st.sampled_from([4, 8, 16]), st.sampled_from([32, 64, 128, 256]), st.integers(2, 4))
def test_baseline_is_parameter_matched(d, width, depth):
    target = X.two_stage_parameter_count(d, width, depth)
    w = X.matched_baseline_width(target, depth)
    got = parameter_count(T * 6, COND_DIM, w, depth)
    assert abs(got / target - 1.0) <= 0.05


def test_baseline_param_count_matches_model():
    target = X.two_stage_parameter_count(8, 64, 3)
    w = X.matched_baseline_width(target, 3)
    assert X.BaselineModel(w, 3).net.params.count() == parameter_count(T * 6, COND_DIM, w, 3)


def test_write_report_formats(tmp_path):
    rows = [{"a": "x", "b": 1, "c": 1 / 3}, {"a": "y", "b": 2, "c": 123456789.0}]
    X.write_report(rows, ["a", "b", "c"], tmp_path)
    rep = X.read_report(tmp_path)
    assert rep["columns"] == ["a", "b", "c"] and rep["rows"][0]["c"] == 1 / 3
    with open(tmp_path / "report.csv") as fh:
        lines = list(csv.reader(fh))
    assert lines == [["a", "b", "c"], ["x", "1", "0.333333"], ["y", "2", "1.23457e+08"]]


def test_write_report_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError, match="c=nan"):
        X.write_report([{"c": float("nan")}], ["c"], tmp_path)


def test_write_report_drops_extra_keys(tmp_path):
    X.write_report([{"a": 1.0, "extra": 2}], ["a"], tmp_path)
    assert json.loads((tmp_path / "report.json").read_text())["rows"] == [{"a": 1.0}]


def test_generation_eval_rows(shard, heldout, vae, synth, planner):
    two = X.TwoStage(synth[0], planner[0])
    cfg = X.PipelineConfig(d=4, width=32, depth=2, plan_steps=6, synth_steps=4)
    target = X.two_stage_parameter_count(4, 32, 2, 16)
    base = X.BaselineModel(X.matched_baseline_width(target, 2), 2)
    rows, clips = X.run_generation_eval(two, vae, base, heldout, cfg, n_prompts=20)
    assert [r["model"] for r in rows] == ["two_stage", "baseline"]
    assert all(set(X.GEN_COLUMNS) <= set(r) for r in rows)
    assert clips["two_stage"].shape == clips["baseline"].shape == (20, T, 16)
    again, _ = X.run_generation_eval(two, vae, base, heldout, cfg, n_prompts=20)
    assert json.dumps(again) == json.dumps(rows)


def test_synth_reconstruction_keys(heldout, vae, synth):
    gen, recon = X.synth_reconstruction(synth[0], vae, heldout, n=10, steps=4)
    assert gen.shape[0] == 10 and set(recon) == {"mel_analog", "multiscale", "synth_event_accuracy"}
    assert all(np.isfinite(v) for v in recon.values())
