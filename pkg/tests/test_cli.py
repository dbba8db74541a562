import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from edgan import cli
from edgan.datagen import SampleSet, SyntheticSpec, make_gaussian_2d, make_synthetic_images, read_pnm, \
    write_image, write_sample_set
from edgan.training import load_checkpoint

TINY = ["--set", "net.image_size=16", "--set", "net.n_down_layers=2", "--set", "net.base_filters=4",
        "--set", "net.z_dim=8", "--set", "epochs=2", "--set", "batch_size=4", "--set", "data.count=8",
        "--set", "sample_every=1"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert cli.main(["train", "--out", str(out), "--quiet", *TINY]) == 0
    (run_dir,) = [p for p in out.iterdir() if p.is_dir()]
    return run_dir


# ------------------------------------------------------------------- train


def test_train_writes_run_layout(trained):
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["run_id"] == trained.name and manifest["seed"] == 0
    assert manifest["config"]["net"]["image_size"] == 16
    with open(trained / "losses.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["epoch", "recon", "d", "g"] and len(rows) == 3
    assert (trained / "checkpoints" / "final.edgn").exists()
    assert (trained / "checkpoints" / "epoch_0001.edgn").exists()
    sample = trained / "samples" / "epoch_0002"
    assert {p.name for p in sample.glob("000_*")} == {"000_recon.ppm", "000_residual.ppm", "000_output.ppm",
                                                      "000_montage.ppm"}


def test_manifest_rerun_is_bit_exact(trained, tmp_path, capsys):
    code, out, _ = run(["train", "--config", str(trained / "manifest.json"), "--out", str(tmp_path), "--quiet",
                        "--deterministic"], capsys)
    assert code == 0
    again = tmp_path / trained.name
    assert (again / "checkpoints" / "final.edgn").read_bytes() == \
        (trained / "checkpoints" / "final.edgn").read_bytes()


def test_unknown_key_suggestion(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "coupled", "lamda": 0.1}))
    code, _, err = run(["train", "--config", str(cfg), "--out", str(tmp_path)], capsys)
    e = error_of(err)
    assert code == 2 and e["key"] == "lamda" and e["suggestion"] == "lambda"


def test_unknown_net_key(tmp_path, capsys):
    code, _, err = run(["train", "--set", "net.zdim=4", "--out", str(tmp_path)], capsys)
    assert code == 2 and error_of(err)["suggestion"] == "z_dim"


def test_invalid_value_is_config_error(tmp_path, capsys):
    code, _, err = run(["train", "--set", "lambda=-1", "--out", str(tmp_path)], capsys)
    assert code == 2 and "lambda" in error_of(err)["message"]


def test_invalid_net_is_config_error(tmp_path, capsys):
    code, _, err = run(["train", "--set", "net.image_size=48", "--out", str(tmp_path)], capsys)
    assert code == 2 and error_of(err)["error"] == "config"


def test_bad_json(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{oops")
    code, _, err = run(["train", "--config", str(cfg)], capsys)
    assert code == 2 and error_of(err)["error"] == "config"


def test_overrides_beat_file(tmp_path):
    spec = cli.resolve_run({"epochs": 7, "mode": "coupled"}, ["epochs=3"], seed=4)
    assert spec.train.epochs == 3 and spec.train.mode == "coupled" and spec.train.seed == 4


def test_full_scale_preset():
    spec = cli.resolve_run({}, scale="paper")
    assert spec.train.net.image_size == 128 and spec.train.net.z_dim == 50


def test_lambda_sweep_makes_four_runs(tmp_path, capsys):
    code, out, _ = run(["train", "--lambda-sweep", "--out", str(tmp_path), "--quiet", *TINY,
                        "--set", "epochs=1"], capsys)
    assert code == 0
    dirs = sorted(p.name for p in tmp_path.iterdir())
    assert len(dirs) == 4 and all(d.startswith("coupled-lambda") for d in dirs)
    assert {d.split("-")[1] for d in dirs} == {"lambda0.001", "lambda0.01", "lambda0.1", "lambda1"}


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.out_root(None) == tmp_path / "env"
    assert cli.out_root("x") == cli.Path("x")


def test_image_dir_data_source(tmp_path, capsys):
    for i, im in enumerate(make_synthetic_images(SyntheticSpec(count=6, image_size=16, seed=0)).images):
        write_image(tmp_path / f"{i}.ppm", im)
    code, _, err = run(["train", "--out", str(tmp_path / "o"), "--quiet", *TINY, "--set", "data.source=dir",
                        "--set", f"data.path={tmp_path}"], capsys)
    assert code == 0, err


# -------------------------------------------------------------------- nrds


def test_nrds_toy(tmp_path, capsys):
    code, out, _ = run(["nrds", "--toy", "--epochs", "20", "--out", str(tmp_path)], capsys)
    assert code == 0 and "mean nrds" in out
    assert (tmp_path / "nrds" / "toy_seed0_report.csv").exists()
    assert (tmp_path / "nrds" / "toy_summary.csv").exists()


def test_nrds_identical_fakes_split_evenly(tmp_path, capsys):
    write_sample_set(tmp_path / "real.csv", make_gaussian_2d([0, 0], 300, 0))
    f = tmp_path / "f.csv"
    write_sample_set(f, make_gaussian_2d([1, 0], 300, 1))
    code, out, _ = run(["nrds", "--real", str(tmp_path / "real.csv"), "--fake", str(f), "--fake", str(f),
                        "--epochs", "20", "--out", str(tmp_path)], capsys)
    assert code == 0
    scores = [float(line.split(",")[2]) for line in out.strip().splitlines()]
    assert scores == pytest.approx([0.5, 0.5], abs=0.02)


def test_nrds_from_checkpoints(trained, tmp_path, capsys):
    ckpt = trained / "checkpoints" / "final.edgn"
    real = tmp_path / "real.edgn"
    imgs = make_synthetic_images(SyntheticSpec(count=40, image_size=16, seed=5)).images
    write_sample_set(real, SampleSet("real", imgs, "real"))
    code, out, err = run(["nrds", "--real", str(real), "--fake", str(ckpt), "--fake", "synthetic:4:9",
                          "--epochs", "3", "--batch-size", "4", "--image-size", "16", "--out", str(tmp_path)],
                         capsys)
    assert code == 0, err
    assert len(out.strip().splitlines()) == 2
    rows = list(csv.DictReader(open(tmp_path / "nrds" / "report.csv")))
    assert [r["source_id"] for r in rows] == ["final", "synthetic:4:9"]


def test_nrds_shape_mismatch(tmp_path, capsys):
    write_sample_set(tmp_path / "real.csv", make_gaussian_2d([0, 0], 10, 0))
    write_sample_set(tmp_path / "img.edgn", SampleSet("img", np.zeros((3, 8, 8, 3), np.float32)))
    code, _, err = run(["nrds", "--real", str(tmp_path / "real.csv"), "--fake", str(tmp_path / "img.edgn"),
                        "--out", str(tmp_path)], capsys)
    assert code == 1 and error_of(err)["error"] == "shape"


def test_nrds_needs_sources(tmp_path, capsys):
    code, _, err = run(["nrds", "--out", str(tmp_path)], capsys)
    assert code == 2 and error_of(err)["error"] == "usage"


# --------------------------------------------------------------- visualize


def test_visualize_single_image(trained, tmp_path, capsys):
    img = write_image(tmp_path / "in.ppm", make_synthetic_images(SyntheticSpec(1, 16, seed=3)).images[0])
    code, out, err = run(["visualize", "--checkpoint", str(trained / "checkpoints" / "final.edgn"),
                          "--images", str(img), "--out", str(tmp_path)], capsys)
    assert code == 0, err
    names = sorted(p.name for p in (tmp_path / "visualize").iterdir())
    assert names == ["000_montage.ppm", "000_output.ppm", "000_recon.ppm", "000_residual.ppm"]
    assert read_pnm(tmp_path / "visualize" / "000_montage.ppm").shape == (16, 4 * 16 + 3 * 2, 3)


def test_visualize_untrained_residual_is_mid_gray(tmp_path, capsys):
    code, _, err = run(["train", "--out", str(tmp_path), "--quiet", *TINY, "--set", "epochs=1",
                        "--set", "d_steps=0", "--set", "g_steps=0"], capsys)
    assert code == 0, err
    (run_dir,) = [p for p in tmp_path.iterdir() if p.is_dir()]
    code, _, err = run(["visualize", "--checkpoint", str(run_dir / "checkpoints" / "final.edgn"),
                        "--images", "synthetic:2", "--out", str(tmp_path)], capsys)
    assert code == 0, err
    res = read_pnm(tmp_path / "visualize" / "000_residual.ppm")
    assert np.abs(res).max() < 0.05


def test_visualize_coupled_omits_residual(tmp_path, capsys):
    code, _, _ = run(["train", "--out", str(tmp_path), "--quiet", *TINY, "--set", "mode=coupled",
                      "--set", "lambda=0.1", "--set", "epochs=1"], capsys)
    assert code == 0
    (run_dir,) = [p for p in tmp_path.iterdir() if p.is_dir()]
    assert load_checkpoint(run_dir / "checkpoints" / "final.edgn").models.gen is None
    code, _, err = run(["visualize", "--checkpoint", str(run_dir / "checkpoints" / "final.edgn"),
                        "--images", "synthetic:1", "--out", str(tmp_path)], capsys)
    assert code == 0 and "residual pane omitted" in err
    names = sorted(p.name for p in (tmp_path / "visualize").iterdir())
    assert names == ["000_montage.ppm", "000_output.ppm", "000_recon.ppm"]


def test_visualize_shape_mismatch(trained, tmp_path, capsys):
    img = write_image(tmp_path / "big.ppm", np.zeros((32, 32, 3)))
    code, _, err = run(["visualize", "--checkpoint", str(trained / "checkpoints" / "final.edgn"),
                        "--images", str(img), "--out", str(tmp_path)], capsys)
    assert code == 1 and error_of(err)["error"] == "shape"


def test_visualize_not_a_checkpoint(tmp_path, capsys):
    p = tmp_path / "x.edgn"
    p.write_bytes(b"garbage")
    code, _, err = run(["visualize", "--checkpoint", str(p), "--images", "synthetic:1"], capsys)
    assert code == 1 and error_of(err)["error"] == "data"


# ------------------------------------------------------------------ process


def test_module_entry_point_reports_json_errors(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "edgan", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip())["error"] == "usage"


def test_missing_command(capsys):
    code, _, err = run([], capsys)
    assert code == 2 and error_of(err)["error"] == "usage"
