import json
import re

import numpy as np
import pytest

from ddflow import datasets, render
from ddflow.cli import density_grid, run
from ddflow.flow import FlowModel
from ddflow.likelihood import evaluate_bpd

TINY_TOY = {"k": 91, "shape": [2], "lr": 0.001, "batch": 64, "epochs": 2, "patience": 3, "seed": 0,
            "blocks": [{"type": "coupling", "h": 91, "net": {"kind": "mlp", "hidden": [32]}}]}


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert run(["gen-toy", "-n", "3000", "--seed", "1", "--out", str(root / "train.ddfg")]) == 0
    assert run(["gen-toy", "-n", "500", "--seed", "2", "--out", str(root / "valid.ddfg")]) == 0
    (root / "spec.json").write_text(json.dumps(TINY_TOY))
    code = run(["train", "--spec", str(root / "spec.json"), "--data", str(root / "train.ddfg"),
                "--valid", str(root / "valid.ddfg"), "--out", str(root / "out")])
    assert code == 0
    return root


def bpd_from(text):
    return float(re.search(r"bpd (\S+) over", text).group(1))


def test_train_outputs(toy_run):
    out = toy_run / "out"
    for name in ("model.ddfm", "report.csv", "spec.json", "summary.json"):
        assert (out / name).exists()
    assert (out / "report.csv").read_text().startswith("epoch,layer,train_nats,valid_nats")


def test_eval_matches_training_report(toy_run, capsys):
    capsys.readouterr()
    csv_path = toy_run / "eval.csv"
    assert run(["eval", "--model", str(toy_run / "out" / "model.ddfm"), "--data", str(toy_run / "valid.ddfg"),
                "--out", str(csv_path)]) == 0
    summary = json.loads((toy_run / "out" / "summary.json").read_text())
    assert abs(bpd_from(capsys.readouterr().out) - summary["final_valid_bpd"]) < 1e-6
    assert len(csv_path.read_text().splitlines()) == 501


def test_plot_density_sums_to_one(toy_run, capsys):
    model_path = toy_run / "out" / "model.ddfm"
    assert run(["plot-density", "--model", str(model_path), "--out", str(toy_run / "d.ppm")]) == 0
    img = render.read_ppm(toy_run / "d.ppm")
    assert img.shape == (91, 91, 3)
    model = FlowModel.load(model_path)
    p = density_grid(model)
    assert abs(p.sum() - 1.0) < 1e-6
    # same code path as the evaluator, point by point
    assert np.isclose(p[45, 68], 2 ** (-2 * evaluate_bpd(model, [[68, 45]]).mean_bpd), rtol=1e-12)


def test_sample_is_seeded(toy_run):
    m = str(toy_run / "out" / "model.ddfm")
    for d in ("s1", "s2"):
        assert run(["sample", "--model", m, "-n", "50", "--seed", "3", "--out", str(toy_run / d)]) == 0
    a = datasets.load_grids(toy_run / "s1" / "samples.ddfg")
    b = datasets.load_grids(toy_run / "s2" / "samples.ddfg")
    assert np.array_equal(a.values, b.values) and len(a) == 50
    assert (toy_run / "s1" / "samples.ppm").read_bytes()[:2] == b"P6"


def test_compress_decompress(toy_run, capsys):
    m = str(toy_run / "out" / "model.ddfm")
    stream, back, one = toy_run / "v.ddfs", toy_run / "back.ddfg", toy_run / "one.ddfg"
    assert run(["compress", "--model", m, "--data", str(toy_run / "valid.ddfg"), "--out", str(stream)]) == 0
    assert run(["decompress", "--model", m, "--data", str(stream), "--out", str(back)]) == 0
    assert run(["decompress", "--model", m, "--data", str(stream), "--index", "7", "--out", str(one)]) == 0
    orig = datasets.load_grids(toy_run / "valid.ddfg")
    assert np.array_equal(datasets.load_grids(back).values, orig.values)
    assert np.array_equal(datasets.load_grids(one).values[0], orig.values[7])


def test_image_paths(tmp_path, mnist_test_path):
    spec = {"k": 2, "shape": [1, 28, 28], "epochs": 1, "seed": 0,
            "blocks": [{"type": "squeeze"}, {"type": "coupling", "h": 2, "net": {"kind": "conv", "width": 4, "depth": 1}},
                       {"type": "splitprior", "net": {"kind": "conv", "width": 4, "depth": 1}}]}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    assert run(["train", "--spec", str(tmp_path / "s.json"), "--data", str(mnist_test_path),
                "--out", str(tmp_path / "m")]) == 0
    assert run(["sample", "--model", str(tmp_path / "m" / "model.ddfm"), "-n", "4", "--out", str(tmp_path / "s")]) == 0
    assert render.read_ppm(tmp_path / "s" / "samples.ppm").shape[0] > 28
    assert run(["gen-maps", "-n", "3", "--out", str(tmp_path / "maps.ddfg")]) == 0
    assert datasets.load_grids(tmp_path / "maps.ddfg").shape == (1, 32, 64)


def test_verify_passes(capsys):
    assert run(["verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        run(["eval", "--model", "m", "--data", "d", "--bogus"])
    assert exc.value.code == 2


def test_failure_is_one_line(tmp_path, capsys):
    assert run(["eval", "--model", str(tmp_path / "missing.ddfm"), "--data", "x"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error:")


def test_resolved_config_logged(tmp_path, caplog):
    with caplog.at_level("INFO", logger="ddflow"):
        run(["gen-toy", "-n", "5", "--out", str(tmp_path / "t.ddfg")])
    assert any("resolved config" in r.message and '"n": 5' in r.getMessage() for r in caplog.records)


def test_thread_cap(tmp_path, monkeypatch):
    monkeypatch.setenv("DDF_THREADS", "1")
    assert run(["gen-toy", "-n", "5", "--out", str(tmp_path / "t.ddfg")]) == 0
    monkeypatch.setenv("DDF_THREADS", "lots")
    assert run(["gen-toy", "-n", "5", "--out", str(tmp_path / "t.ddfg")]) == 1


def test_plot_density_rejects_images(tmp_path, capsys):
    FlowModel([], 2, (1, 2, 2)).save(tmp_path / "m.ddfm")
    assert run(["plot-density", "--model", str(tmp_path / "m.ddfm"), "--out", str(tmp_path / "p.ppm")]) == 1
