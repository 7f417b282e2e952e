import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from flowprior.benchmark import CSV_HEADER, replay_observation
from flowprior.cli import main
from flowprior.flow import FlowModel, load_checkpoint, save_checkpoint
from flowprior.imageio import decode_pnm, grid_shape, read_image
from flowprior.tensor import load_tensor, save_tensor
from flowprior.training import load_image_dir

SMALL = {
    "dataset": {"n": 24, "shape": [1, 16, 16]},
    "model": {"n_blocks": 2, "n_steps": 2, "hidden": 4},
    "train": {"steps": 60, "batch_size": 8, "learning_rate": 3e-3},
}


def run(argv, capsys):
    status = main([str(a) for a in argv])
    out = capsys.readouterr()
    return status, out.out, out.err


def write_config(path, data):
    path.write_text(json.dumps(data))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    config = write_config(root / "small.json", SMALL)
    assert main(["train", "--config", str(config), "--out", str(root / "a")]) == 0
    assert main(["train", "--config", str(config), "--out", str(root / "b")]) == 0
    return root


@pytest.fixture
def identity_checkpoint(tmp_path):
    path = tmp_path / "identity.frck"
    save_checkpoint(path, FlowModel.create((1, 16, 16), 2, 2, 4, seed=0, orthogonal=False))
    return path


@pytest.fixture
def truth_file(tmp_path):
    yy, xx = np.mgrid[0:16, 0:16] / 16
    truth = (0.5 + 0.3 * np.sin(2 * np.pi * (xx + 0.5 * yy)))[None]
    path = tmp_path / "truth.frt"
    save_tensor(path, truth)
    return path, truth


class TestTrain:
    def test_outputs(self, trained):
        out = trained / "a"
        assert {p.name for p in out.iterdir()} >= {"model.frck", "loss.csv", "config.json"}
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["train"]["steps"] == 60 and cfg["model"]["checkpoint"].endswith("model.frck")
        model = load_checkpoint(out / "model.frck")
        assert model.input_shape == (1, 16, 16)

    def test_checkpoint_bytes_are_reproducible(self, trained):
        assert (trained / "a" / "model.frck").read_bytes() == (trained / "b" / "model.frck").read_bytes()
        assert (trained / "a" / "loss.csv").read_bytes() == (trained / "b" / "loss.csv").read_bytes()

    def test_loss_decreases(self, trained):
        with open(trained / "a" / "loss.csv") as f:
            bpd = [float(r["bits_per_dim"]) for r in csv.DictReader(f)]
        assert len(bpd) == 60 and all(np.isfinite(bpd))
        assert np.mean(bpd[-10:]) < np.mean(bpd[:10])

    def test_seed_changes_the_model(self, trained, tmp_path, capsys):
        config = write_config(tmp_path / "c.json", {**SMALL, "train": {**SMALL["train"], "steps": 2}})
        run(["train", "--config", config, "--seed", 1, "--out", tmp_path / "s1"], capsys)
        run(["train", "--config", config, "--seed", 2, "--out", tmp_path / "s2"], capsys)
        assert (tmp_path / "s1" / "model.frck").read_bytes() != (tmp_path / "s2" / "model.frck").read_bytes()


def test_gen_data_reloads_to_the_same_split(tmp_path, capsys):
    config = write_config(tmp_path / "c.json", SMALL)
    status, _, _ = run(["gen-data", "--config", config, "--n", 20, "--out", tmp_path / "data"], capsys)
    assert status == 0
    files = sorted(p.name for p in (tmp_path / "data").glob("images/img_*.frt"))
    assert len(files) == 20
    assert (tmp_path / "data" / "preview.ppm").exists()

    from flowprior.benchmark import load_dataset
    from flowprior.config import config_from_dict
    expected = load_dataset(config_from_dict({**SMALL, "dataset": {"n": 20, "shape": [1, 16, 16]}}))
    reloaded = load_image_dir(tmp_path / "data" / "images")
    np.testing.assert_array_equal(reloaded.train, expected.train)
    np.testing.assert_array_equal(reloaded.test, expected.test)


def test_train_on_directory(tmp_path, capsys):
    config = write_config(tmp_path / "c.json", SMALL)
    run(["gen-data", "--config", config, "--n", 20, "--out", tmp_path / "data"], capsys)
    status, out, _ = run(["train", "--config", config, "--steps", 3, "--data", tmp_path / "data" / "images",
                          "--out", tmp_path / "t"], capsys)
    assert status == 0 and "wrote" in out


class TestSolve:
    def test_full_observation_reproduces_it(self, identity_checkpoint, truth_file, tmp_path, capsys):
        path, truth = truth_file
        status, out, _ = run(["solve", "--checkpoint", identity_checkpoint, "--image", path,
                              "--task", "inpaint_random", "--fraction", 0, "--lam", 0,
                              "--optimizer", "lbfgs", "--tolerance", 1e-12, "--out", tmp_path / "s"], capsys)
        assert status == 0
        recon = load_tensor(tmp_path / "s" / "reconstruction.frt")
        observed = load_tensor(tmp_path / "s" / "observed.frt")
        np.testing.assert_allclose(recon, observed, atol=1e-8)
        assert "psnr=" in out and "terminated_by=" in out

    def test_deconvolution_matches_fourier_solution(self, identity_checkpoint, truth_file, tmp_path, capsys):
        path, truth = truth_file
        status, _, _ = run(["solve", "--checkpoint", identity_checkpoint, "--image", path, "--task", "deblur",
                            "--kernel", 3, "--sigma", 0, "--lam", 0, "--optimizer", "lbfgs",
                            "--tolerance", 1e-12, "--iters", 2000, "--out", tmp_path / "s"], capsys)
        assert status == 0
        # uniform circular 3x3 response; no zeros on a 16x16 grid
        psf = np.zeros((16, 16))
        psf[np.ix_([-1, 0, 1], [-1, 0, 1])] = 1 / 9
        response = np.fft.fft2(psf)
        assert np.abs(response).min() > 1e-3
        observed = load_tensor(tmp_path / "s" / "observed.frt")
        oracle = np.real(np.fft.ifft2(np.fft.fft2(observed[0]) / response))
        np.testing.assert_allclose(oracle, truth[0], atol=1e-10)
        recon = load_tensor(tmp_path / "s" / "reconstruction.frt")
        assert np.max(np.abs(recon[0] - oracle)) < 1e-3

    def test_outputs_and_determinism(self, trained, truth_file, tmp_path, capsys):
        path, _ = truth_file
        argv = ["solve", "--checkpoint", trained / "a" / "model.frck", "--image", path, "--task", "denoise",
                "--formulation", "synthesis", "--iters", 20]
        run(argv + ["--out", tmp_path / "x"], capsys)
        run(argv + ["--out", tmp_path / "y"], capsys)
        for name in ("config.json", "problem.json", "observed.frt", "observed.ppm", "reconstruction.frt",
                     "reconstruction.ppm"):
            assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes(), name
        report = json.loads((tmp_path / "x" / "report.json").read_text())
        assert report["iterations_run"] == 20 and report["formulation"] == "synthesis"
        problem = json.loads((tmp_path / "x" / "problem.json").read_text())
        assert problem["noise_sigma"] == 0.01

    def test_low_resolution_observation_is_displayed_at_full_size(self, identity_checkpoint, truth_file,
                                                                  tmp_path, capsys):
        path, _ = truth_file
        run(["solve", "--checkpoint", identity_checkpoint, "--image", path, "--task", "sr2", "--iters", 5,
             "--out", tmp_path / "s"], capsys)
        assert load_tensor(tmp_path / "s" / "observed.frt").shape == (1, 8, 8)
        assert read_image(tmp_path / "s" / "observed.ppm").shape == (1, 16, 16)


def test_metrics_command(tmp_path, capsys):
    truth = np.zeros((1, 16, 16))
    save_tensor(tmp_path / "t.frt", truth)
    save_tensor(tmp_path / "a.frt", truth + 0.1)
    status, out, _ = run(["metrics", tmp_path / "a.frt", tmp_path / "t.frt"], capsys)
    assert status == 0
    assert json.loads(out)["psnr"] == pytest.approx(20.0, abs=1e-12)


BENCH_CONFIG = {
    **SMALL,
    "tasks": ["deblur", "inpaint_random"],
    "lambda_sweep": [1e-4, 1e-3],
    "n_eval": 3,
    "n_figure": 2,
    "solver": {"synthesis": {"max_iters": 15}, "analysis": {"max_iters": 15}},
}


@pytest.fixture(scope="module")
def runs(trained, tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    config = write_config(root / "c.json", BENCH_CONFIG)
    for name in ("one", "two"):
        argv = ["benchmark", "--config", config, "--checkpoint", trained / "a" / "model.frck", "--out", root / name]
        assert main([str(a) for a in argv]) == 0
    return root


class TestBenchmark:
    def test_rows(self, runs):
        with open(runs / "one" / "benchmark.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == CSV_HEADER
        assert [(r[0], r[1]) for r in rows[1:]] == [
            ("deblur", "synthesis"), ("deblur", "analysis"),
            ("inpaint_random", "synthesis"), ("inpaint_random", "analysis"),
        ]
        assert all(float(r[2]) in (1e-4, 1e-3) for r in rows[1:])

    def test_best_lambda_is_the_sweep_maximum(self, runs):
        with open(runs / "one" / "sweep.csv") as f:
            sweep = list(csv.DictReader(f))
        with open(runs / "one" / "benchmark.csv") as f:
            best = list(csv.DictReader(f))
        for row in best:
            cands = [s for s in sweep if (s["task"], s["formulation"]) == (row["task"], row["formulation"])]
            top = max(cands, key=lambda s: float(s["psnr_mean"]))
            assert float(top["lambda"]) == float(row["lambda"])
            assert float(top["psnr_mean"]) == pytest.approx(float(row["psnr_mean"]), abs=1e-6)

    def test_grids(self, runs):
        for task in ("deblur", "inpaint_random"):
            grid = decode_pnm((runs / "one" / f"grid_{task}.ppm").read_bytes())
            assert grid.shape == (3,) + grid_shape(4, 2, 16, 16)

    def test_observations_replay_exactly(self, runs):
        truths = load_tensor(runs / "one" / "truth.frt")
        records = json.loads((runs / "one" / "observations.json").read_text())
        for record in records:
            stored = load_tensor(runs / "one" / f"observed_{record['task']}.frt")
            np.testing.assert_array_equal(replay_observation(record, truths), stored)

    def test_two_runs_are_byte_identical(self, runs):
        names = sorted(p.name for p in (runs / "one").iterdir())
        assert names == sorted(p.name for p in (runs / "two").iterdir())
        for name in names:
            assert (runs / "one" / name).read_bytes() == (runs / "two" / name).read_bytes(), name


class TestErrors:
    def check(self, argv, capsys, category, status):
        code, _, err = run(argv, capsys)
        assert code == status
        lines = err.strip().splitlines()
        assert len(lines) == 1 and lines[0].startswith(f"error: {category}: ")

    def test_invalid_json(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{")
        self.check(["gen-data", "--config", tmp_path / "bad.json", "--out", tmp_path], capsys, "config", 2)

    def test_unknown_key(self, tmp_path, capsys):
        config = write_config(tmp_path / "c.json", {"modle": {}})
        self.check(["gen-data", "--config", config, "--out", tmp_path], capsys, "config", 2)

    def test_missing_checkpoint(self, tmp_path, truth_file, capsys):
        path, _ = truth_file
        self.check(["solve", "--checkpoint", tmp_path / "none.frck", "--image", path, "--task", "denoise",
                    "--out", tmp_path / "o"], capsys, "io", 3)

    def test_corrupt_checkpoint(self, tmp_path, truth_file, capsys):
        path, _ = truth_file
        (tmp_path / "bad.frck").write_bytes(b"nope")
        self.check(["solve", "--checkpoint", tmp_path / "bad.frck", "--image", path, "--task", "denoise",
                    "--out", tmp_path / "o"], capsys, "format", 4)

    def test_shape_mismatch(self, tmp_path, identity_checkpoint, capsys):
        save_tensor(tmp_path / "big.frt", np.zeros((1, 32, 32)))
        self.check(["solve", "--checkpoint", identity_checkpoint, "--image", tmp_path / "big.frt",
                    "--task", "denoise", "--out", tmp_path / "o"], capsys, "shape", 5)

    def test_benchmark_needs_checkpoint(self, tmp_path, capsys):
        self.check(["benchmark", "--out", tmp_path], capsys, "config", 2)

    def test_too_few_test_images(self, tmp_path, identity_checkpoint, capsys):
        config = write_config(tmp_path / "c.json", {**SMALL, "n_eval": 50})
        self.check(["benchmark", "--config", config, "--checkpoint", identity_checkpoint, "--out", tmp_path / "o"],
                   capsys, "data", 7)


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "flowprior", "--version"], capture_output=True, text=True)
    assert done.returncode == 0 and done.stdout.startswith("flowprior ")
