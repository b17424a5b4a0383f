import json
import os

import numpy as np
import pytest

from jointcorr.cli import main, parse_args
from jointcorr.implicit import SphereGenerator, generator_to_config
from jointcorr.mesh import icosphere
from jointcorr.meshio import load_mesh, read_correspondences, save_mesh


@pytest.fixture(scope="module")
def coll(tmp_path_factory):
    d = tmp_path_factory.mktemp("coll")
    assert main(["synth", "--family", "sphere-radius", "--count", "3", "--seed", "1", "--out", str(d)]) == 0
    return d


def test_synth_writes_manifest(coll):
    man = json.loads((coll / "manifest.json").read_text())
    assert man["count"] == 3 and man["family"] == "sphere-radius"


def test_energy_check(tmp_path, capsys):
    p = tmp_path / "m.ply"
    save_mesh(icosphere(1), p)
    assert main(["energy-check", "--mesh", str(p), "--kind", "acap", "--mtx", str(tmp_path / "L.mtx")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["max_relative_error"] <= 1e-8
    assert (tmp_path / "L.mtx").exists()


def test_register_and_evaluate(coll, tmp_path, capsys):
    out = tmp_path / "def.ply"
    corr = tmp_path / "pred" / "shape_001.corr"
    os.makedirs(corr.parent)
    assert main(["register", "--template", str(coll / "shape_000.ply"), "--target", str(coll / "shape_001.ply"),
                 "--no-rigid-init", "--out", str(out), "--corr", str(corr)]) == 0
    assert load_mesh(out).n == load_mesh(coll / "shape_000.ply").n
    assert read_correspondences(corr).shape[1] == 2
    save_mesh(load_mesh(coll / "shape_002.ply"), tmp_path / "pred" / "shape_002.ply")
    capsys.readouterr()
    assert main(["evaluate", "--manifest", str(coll / "manifest.json"), "--pred", str(tmp_path / "pred"),
                 "--errors-out", str(tmp_path / "err")]) == 0
    m = json.loads(capsys.readouterr().out)
    assert m["per_shape_mean"][1] == 0
    assert len(os.listdir(tmp_path / "err")) == 2


def test_interpolate_and_correspond(tmp_path, capsys):
    g = tmp_path / "gen.json"
    g.write_text(json.dumps(generator_to_config(SphereGenerator())))
    b = ["--bounds", "-2 -2 -2 2 2 2", "--grid-dims", "20 20 20"]
    assert main(["interpolate", "--generator", str(g), "--z-start", "1", "--z-end", "1.5", "--T", "2",
                 "--out", str(tmp_path / "path"), *b]) == 0
    assert len(os.listdir(tmp_path / "path")) == 4
    assert main(["correspond", "--generator", str(g), "--code", "1", "--direction", "1", *b,
                 "--simplify", "200", "--out", str(tmp_path / "moved.ply")]) == 0
    assert load_mesh(tmp_path / "moved.ply").n > 0


def test_propagate_graph_refine(coll, tmp_path):
    m = str(coll / "manifest.json")
    d = tmp_path / "deformed"
    assert main(["propagate", "--manifest", m, "--T", "2", "--grid-dims", "20 20 20", "--out", str(d)]) == 0
    assert main(["graph", "build", "--manifest", m, "--deformed", str(d), "--K", "1",
                 "--out", str(tmp_path / "g")]) == 0
    assert main(["graph", "propagate", "--manifest", m, "--graph", str(tmp_path / "g"), "--deformed", str(d),
                 "--out", str(tmp_path / "gc")]) == 0
    assert len(os.listdir(tmp_path / "gc")) == 2
    assert main(["refine", "--manifest", m, "--deformed", str(d), "--steps", "3", "--samples", "500",
                 "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "loss.csv").exists()


def test_pipeline_requires_seed():
    with pytest.raises(SystemExit):
        parse_args(["pipeline"])


def test_config_file_defaults_and_override(tmp_path):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"T": 3, "lambda_d": 0.5}))
    a = parse_args(["pipeline", "--seed", "1", "--config", str(c), "--T", "7"])
    assert a.T == 7 and a.lambda_d == 0.5
    c.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        parse_args(["pipeline", "--seed", "1", "--config", str(c)])


def test_pipeline_stdout_report(capsys):
    assert main(["pipeline", "--seed", "2", "--family", "sphere-radius", "--count", "3", "--grid-dims", "20",
                 "--T", "2", "--refine-steps", "3", "--skip-stage1", "--skip-baseline"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["config"]["seed"] == 2 and rep["final"]["stage"] == "stage3"


def test_errors_return_nonzero(tmp_path, capsys):
    assert main(["synth", "--family", "teapot", "--out", str(tmp_path)]) == 1
    assert "unknown family" in capsys.readouterr().err
