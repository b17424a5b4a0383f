import json
import os
from dataclasses import fields

import numpy as np
import pytest

from jointcorr.errors import StageError
from jointcorr.pipeline import PipelineConfig, dumps_report, run_pipeline, stage_rng

SMALL = dict(seed=3, family="sphere-radius", count=6, grid_dims=(24, 24, 24), T=4, simplify_target=300,
             refine_steps=20, refine_samples=1500, diag_codes=1, reg_max_iters=50)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    res = run_pipeline(PipelineConfig(**SMALL, output_dir=str(out)))
    return res, out


def test_end_to_end_improves_on_initialization(run):
    rep = run[0].report
    assert rep["final"]["stage"] == "stage3"
    assert rep["stage2"]["mean"] <= rep["baseline"]["mean"]
    assert rep["stage3"]["mean"] <= rep["stage2"]["mean"]
    assert rep["stage3"]["epoch_totals_monotone"]


def test_report_echoes_every_knob(run):
    rep = run[0].report
    assert set(rep["config"]) == {f.name for f in fields(PipelineConfig)}
    assert rep["config"]["lambda_geo"] == 1e-3 and rep["config"]["lambda_cyc"] == 1e-4
    assert rep["config"]["epsilon"] == 1e-3 and rep["config"]["alpha"] == 10.0
    assert rep["stage1"]["codes"][0]["r_geo"] >= 0


def test_artifacts_written(run):
    res, out = run
    assert json.loads((out / "report.json").read_text()) == json.loads(dumps_report(res.report))
    for stage in ("stage2", "stage3"):
        assert len(os.listdir(out / "correspondences" / stage)) == SMALL["count"] - 1
    assert len(os.listdir(out / "errors")) == SMALL["count"] - 1
    assert (out / "refine_loss.csv").exists()
    assert len(os.listdir(out / "refined")) == SMALL["count"]


def test_byte_identical_across_runs_and_workers(run):
    again = run_pipeline(PipelineConfig(**SMALL, output_dir=run[0].report["config"]["output_dir"]), workers=2)
    assert dumps_report(again.report) == dumps_report(run[0].report)


def test_skipping_stage3_reports_stage2_only():
    cfg = PipelineConfig(**{**SMALL, "count": 3, "stage1": False, "baseline": False, "stage3": False})
    rep = run_pipeline(cfg).report
    assert "stage3" not in rep and "stage1" not in rep
    assert rep["final"]["stage"] == "stage2"
    assert "reduction_vs_baseline" not in rep["final"]


def test_stage_failure_is_tagged(tmp_path):
    cfg = PipelineConfig(**{**SMALL, "count": 3, "stage1": False, "baseline": False, "stage2": False},
                         output_dir=str(tmp_path))
    with pytest.raises(StageError, match="stage3"):
        run_pipeline(cfg)
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["failed_stage"] == "stage3"


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(seed=0, lambda_d=-1.0)
    with pytest.raises(ValueError):
        PipelineConfig(seed=0, epsilon=0.0)
    with pytest.raises(ValueError, match="unknown config keys"):
        PipelineConfig.from_dict({"seed": 0, "workers": 4})
    cfg = PipelineConfig(seed=5, grid_dims=32)
    assert cfg.grid_dims == (32, 32, 32)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


def test_stage_seeds_independent_and_reproducible():
    a = stage_rng(1, "stage1").random(4)
    assert np.array_equal(a, stage_rng(1, "stage1").random(4))
    assert not np.array_equal(a, stage_rng(1, "stage3").random(4))
    assert not np.array_equal(a, stage_rng(2, "stage1").random(4))
