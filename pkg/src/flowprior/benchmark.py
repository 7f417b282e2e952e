"""The reconstruction benchmark: every task, both formulations, a lambda sweep."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import astuple, dataclass

import numpy as np

from .config import ConfigError, ExperimentConfig, derive_seed, task_operator
from .flow import FlowModel
from .imageio import image_grid
from .metrics import mean_std, psnr, ssim
from .operators import degrade, from_descriptor
from .solvers import solve_analysis_batch, solve_synthesis_batch
from .tensor import make_rng, save_tensor
from .training import Dataset, load_image_dir, make_synthetic_dataset

log = logging.getLogger(__name__)

FORMULATIONS = ("synthesis", "analysis")
GRID_LABELS = ("truth", "observed", "synthesis", "analysis")


class InsufficientDataError(ValueError):
    pass


@dataclass
class BenchmarkRow:
    task: str
    formulation: str
    lam: float
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    iters_mean: float

    def cells(self):
        return [self.task, self.formulation, repr(self.lam)] + [f"{v:.6f}" for v in astuple(self)[3:]]


CSV_HEADER = ["task", "formulation", "lambda", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "iters_mean"]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    data = cfg.dataset
    if data["source"] == "synthetic":
        rng = make_rng(derive_seed(cfg.seed, "dataset"))
        return make_synthetic_dataset(rng, int(data["n"]), tuple(data["shape"]), int(data["levels"]))
    if data["source"] == "directory":
        if not data.get("directory"):
            raise ConfigError("dataset.directory is required when dataset.source is 'directory'")
        return load_image_dir(data["directory"])
    raise ConfigError(f"unknown dataset source {data['source']!r}")


def observe(task, op, truths, seed):
    """Degraded observations of ``truths`` plus the record needed to recreate them."""
    noise_seed = derive_seed(seed, "noise", task["name"])
    problem = degrade(op, truths, float(task["noise_sigma"]), make_rng(noise_seed))
    record = {"task": task["name"], "operator": op.descriptor, "noise_sigma": float(task["noise_sigma"]),
              "noise_seed": noise_seed}
    return problem.observed, record


def replay_observation(record, truths):
    """Recompute observations from a stored record (see :func:`observe`)."""
    op = from_descriptor(record["operator"], truths.shape[1:])
    return degrade(op, truths, record["noise_sigma"], make_rng(record["noise_seed"])).observed


def display_observation(observed, shape):
    """Bring an observation to image ``shape`` for display; low-res ones are pixel-replicated."""
    f = shape[-1] // observed.shape[-1]
    if f > 1:
        observed = np.repeat(np.repeat(observed, f, axis=-2), f, axis=-1)
    return observed


def _solve(formulation, model, op, ys, cfg, lam):
    solver = solve_synthesis_batch if formulation == "synthesis" else solve_analysis_batch
    return solver(model, op, ys, cfg.solver_config(formulation), lam=lam)


def run_task(model: FlowModel, task, truths, cfg: ExperimentConfig):
    """Sweep lambda for both formulations on one task.

    Returns ``(rows, sweep, observed, best_reconstructions, record)``; the best
    lambda per formulation is the one with the highest mean PSNR (first wins
    on ties).
    """
    shape = truths.shape[1:]
    op = task_operator(task, shape, cfg.seed)
    observed, record = observe(task, op, truths, cfg.seed)
    n = len(truths)
    lams = [float(v) for v in cfg.lambda_sweep]
    ys = np.concatenate([observed] * len(lams))
    lam_col = np.repeat(lams, n)

    rows, sweep, best = [], [], {}
    for formulation in FORMULATIONS:
        log.info("%s / %s: %d solves", task["name"], formulation, len(ys))
        reports = _solve(formulation, model, op, ys, cfg, lam_col)
        scores = []
        for k, lam in enumerate(lams):
            chunk = reports[k * n:(k + 1) * n]
            p = [psnr(r.reconstruction, t) for r, t in zip(chunk, truths)]
            s = [ssim(r.reconstruction, t) for r, t in zip(chunk, truths)]
            it = [r.iterations_run for r in chunk]
            scores.append((float(np.mean(p)), p, s, it, chunk))
            sweep.append([task["name"], formulation, repr(lam), f"{np.mean(p):.6f}", f"{np.mean(s):.6f}"])
        k = int(np.argmax([sc[0] for sc in scores]))
        _, p, s, it, chunk = scores[k]
        pm, ps = mean_std(p)
        sm, ss = mean_std(s)
        rows.append(BenchmarkRow(task["name"], formulation, lams[k], pm, ps, sm, ss, float(np.mean(it))))
        best[formulation] = np.stack([r.reconstruction for r in chunk])
    return rows, sweep, observed, best, record


def write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_benchmark_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        for key in CSV_HEADER[2:]:
            row[key] = float(row[key])
    return rows


def run_benchmark(model: FlowModel, dataset: Dataset, cfg: ExperimentConfig, out_dir):
    """Run every configured task and write CSVs, observations and image grids to ``out_dir``."""
    if len(dataset.test) < cfg.n_eval:
        raise InsufficientDataError(f"need {cfg.n_eval} test images, dataset has {len(dataset.test)}")
    truths = np.asarray(dataset.test[:cfg.n_eval])
    if truths.shape[1:] != tuple(model.input_shape):
        raise ConfigError(f"model expects {tuple(model.input_shape)} images, dataset has {truths.shape[1:]}")
    os.makedirs(out_dir, exist_ok=True)
    save_tensor(os.path.join(out_dir, "truth.frt"), truths)

    all_rows, all_sweep, records = [], [], []
    for task in cfg.tasks:
        rows, sweep, observed, best, record = run_task(model, task, truths, cfg)
        all_rows += rows
        all_sweep += sweep
        records.append(record)
        save_tensor(os.path.join(out_dir, f"observed_{task['name']}.frt"), observed)
        k = cfg.n_figure
        shown = display_observation(observed[:k], truths.shape[1:])
        grid = [truths[:k], shown, best["synthesis"][:k], best["analysis"][:k]]
        # solvers are unconstrained; clamp before 8-bit output
        grid = [np.clip(row, 0.0, 1.0) for row in grid]
        image_grid([im for row in grid for im in row], rows=len(grid), labels=GRID_LABELS,
                   path=os.path.join(out_dir, f"grid_{task['name']}.ppm"))
        for row in rows:
            log.info("%s %s lambda=%g psnr=%.2f±%.2f ssim=%.3f", row.task, row.formulation, row.lam,
                     row.psnr_mean, row.psnr_std, row.ssim_mean)

    write_rows(os.path.join(out_dir, "benchmark.csv"), CSV_HEADER, [r.cells() for r in all_rows])
    write_rows(os.path.join(out_dir, "sweep.csv"), ["task", "formulation", "lambda", "psnr_mean", "ssim_mean"],
               all_sweep)
    with open(os.path.join(out_dir, "observations.json"), "w") as f:
        json.dump(records, f, indent=1, sort_keys=True)
    return all_rows
