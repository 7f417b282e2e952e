"""Command-line entry point: ``flowprior {train,solve,benchmark,metrics,gen-data}``.

Every command writes its fully resolved configuration as ``config.json``
next to its outputs. Failures print a single ``error: <category>: <message>``
line to stderr and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .benchmark import InsufficientDataError, display_observation, load_dataset, run_benchmark
from .config import ConfigError, ExperimentConfig, derive_seed, load_config, make_task, task_operator, TASK_PRESETS
from .flow import CheckpointFormatError, FlowModel, ZeroVarianceError, load_checkpoint, save_checkpoint
from .imageio import ImageFormatError, image_grid, read_image, write_image
from .metrics import ImageTooSmallError, psnr, ssim
from .operators import degrade
from .solvers import NonFiniteObjectiveError, solve
from .tensor import KernelTooLargeError, ShapeMismatchError, SingularMatrixError, TensorFormatError, make_rng
from .training import NonFiniteGradientError, train

log = logging.getLogger("flowprior")

# (exception types, category, exit status); first match wins
ERROR_CATEGORIES = [
    ((ConfigError,), "config", 2),
    ((FileNotFoundError, IsADirectoryError, PermissionError, OSError), "io", 3),
    ((ImageFormatError, TensorFormatError, CheckpointFormatError), "format", 4),
    ((ShapeMismatchError, KernelTooLargeError, ImageTooSmallError), "shape", 5),
    ((NonFiniteGradientError, NonFiniteObjectiveError, SingularMatrixError, ZeroVarianceError, FloatingPointError),
     "numeric", 6),
    ((InsufficientDataError,), "data", 7),
    ((ValueError,), "invalid-argument", 2),
]


def _prepare_out(path):
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write-test")
    with open(probe, "w"):
        pass
    os.remove(probe)
    return path


def _write_json(path, data):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# --- commands ---


def cmd_train(args):
    cfg = _base_config(args)
    if args.steps is not None:
        cfg.train["steps"] = args.steps
    if args.lr is not None:
        cfg.train["learning_rate"] = args.lr
    if args.batch_size is not None:
        cfg.train["batch_size"] = args.batch_size
    if args.data is not None:
        cfg.dataset.update(source="directory", directory=args.data)
    for key in ("n_blocks", "n_steps", "hidden"):
        value = getattr(args, key)
        if value is not None:
            cfg.model[key] = value
    out = _prepare_out(args.out)
    checkpoint = os.path.join(out, "model.frck")
    cfg.model["checkpoint"] = checkpoint
    cfg.validate()
    cfg.write(os.path.join(out, "config.json"))

    dataset = load_dataset(cfg)
    m = cfg.model
    model = FlowModel.create(dataset.shape, m["n_blocks"], m["n_steps"], m["hidden"],
                             seed=derive_seed(cfg.seed, "model"))
    model, curve = train(model, dataset, cfg.train_config())
    save_checkpoint(checkpoint, model)
    curve.write_csv(os.path.join(out, "loss.csv"))
    if curve.bits_per_dim:
        print(f"bits/dim first={curve.bits_per_dim[0]:.4f} last={curve.bits_per_dim[-1]:.4f}")
    print(f"wrote {checkpoint}")


def cmd_gen_data(args):
    cfg = _base_config(args)
    if args.n is not None:
        cfg.dataset["n"] = args.n
    cfg.dataset["source"] = "synthetic"
    cfg.validate()
    out = _prepare_out(args.out)
    cfg.write(os.path.join(out, "config.json"))
    dataset = load_dataset(cfg)
    images = dataset.images
    # names sort in generation order, so reloading the directory repeats the split
    image_dir = os.path.join(out, "images")
    os.makedirs(image_dir, exist_ok=True)
    for i, img in enumerate(images):
        write_image(os.path.join(image_dir, f"img_{i:04d}.frt"), img)
    shown = images[:40]
    image_grid(shown, rows=-(-len(shown) // 10), path=os.path.join(out, "preview.ppm"))
    print(f"wrote {len(images)} images to {image_dir}")


def cmd_solve(args):
    cfg = _base_config(args)
    overrides = {k: v for k, v in (("noise_sigma", args.sigma), ("fraction", args.fraction),
                                    ("kernel", args.kernel), ("factor", args.factor),
                                    ("side_fraction", args.side_fraction)) if v is not None}
    task = make_task(args.task, **overrides)
    solver = cfg.solver[args.formulation]
    for key, value in (("lam", args.lam), ("max_iters", args.iters), ("optimizer", args.optimizer),
                       ("step_size", args.step_size), ("grad_tolerance", args.tolerance)):
        if value is not None:
            solver[key] = value
    cfg.tasks = [task]
    model = load_checkpoint(args.checkpoint)
    truth = read_image(args.image)
    if truth.ndim == 2:
        truth = truth[None]
    if truth.shape != tuple(model.input_shape):
        raise ShapeMismatchError(f"image shape {truth.shape} does not match model input {tuple(model.input_shape)}")
    cfg.dataset["shape"] = list(truth.shape)
    cfg.validate()
    out = _prepare_out(args.out)

    op = task_operator(task, truth.shape, cfg.seed)
    noise_seed = args.noise_seed if args.noise_seed is not None else derive_seed(cfg.seed, "noise", task["name"])
    problem = degrade(op, truth, float(task["noise_sigma"]), make_rng(noise_seed))
    report = solve(model, problem, cfg.solver_config(args.formulation), args.formulation)

    record = {"task": task["name"], "operator": op.descriptor, "noise_sigma": float(task["noise_sigma"]),
              "noise_seed": int(noise_seed), "image": os.path.abspath(args.image),
              "checkpoint": os.path.abspath(args.checkpoint), "formulation": args.formulation}
    resolved = cfg.to_dict()
    resolved["run"] = record
    _write_json(os.path.join(out, "config.json"), resolved)
    _write_json(os.path.join(out, "problem.json"), record)
    write_image(os.path.join(out, "observed.frt"), problem.observed)
    write_image(os.path.join(out, "observed.ppm"), display_observation(problem.observed, truth.shape))
    report.save(os.path.join(out, "reconstruction.frt"), os.path.join(out, "report.json"))
    # solvers are unconstrained; clamp before 8-bit output
    write_image(os.path.join(out, "reconstruction.ppm"), np.clip(report.reconstruction, 0.0, 1.0))
    print(f"psnr={psnr(report.reconstruction, truth):.4f} ssim={ssim(report.reconstruction, truth):.4f} "
          f"iterations={report.iterations_run} terminated_by={report.terminated_by}")


def cmd_benchmark(args):
    cfg = _base_config(args)
    if args.iters is not None:
        for form in cfg.solver:
            cfg.solver[form]["max_iters"] = args.iters
    if args.lam is not None:
        cfg.lambda_sweep = args.lam
    if args.n_eval is not None:
        cfg.n_eval = args.n_eval
        cfg.n_figure = min(cfg.n_figure, args.n_eval)
    if args.tasks is not None:
        cfg.tasks = [make_task(t) for t in args.tasks]
    if args.checkpoint is not None:
        cfg.model["checkpoint"] = args.checkpoint
    if not cfg.model.get("checkpoint"):
        raise ConfigError("a checkpoint is required (--checkpoint or model.checkpoint)")
    cfg.validate()
    out = _prepare_out(args.out)
    cfg.write(os.path.join(out, "config.json"))
    model = load_checkpoint(cfg.model["checkpoint"])
    dataset = load_dataset(cfg)
    rows = run_benchmark(model, dataset, cfg, out)
    for row in rows:
        print(f"{row.task:15s} {row.formulation:9s} lambda={row.lam:.2e} "
              f"psnr={row.psnr_mean:.2f}±{row.psnr_std:.2f} ssim={row.ssim_mean:.3f}±{row.ssim_std:.3f}")


def cmd_metrics(args):
    a, b = read_image(args.image), read_image(args.truth)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"images differ in shape: {a.shape} vs {b.shape}")
    print(json.dumps({"psnr": psnr(a, b, args.peak), "ssim": ssim(a, b, args.peak)}))


# --- parser ---


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="flowprior", description="Inverse problems with a normalizing-flow prior.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="JSON experiment config merged over the defaults")
        p.add_argument("--seed", type=int, help="master seed (default from config, 0)")
        p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")

    p = sub.add_parser("train", help="train a flow by maximum likelihood")
    common(p, "runs/train")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--data", help="directory of .pgm/.ppm/.frt images instead of synthetic data")
    p.add_argument("--n-blocks", dest="n_blocks", type=int)
    p.add_argument("--n-steps", dest="n_steps", type=int, help="flow steps per block")
    p.add_argument("--hidden", type=int, help="coupling network width")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as .frt files")
    common(p, "runs/data")
    p.add_argument("--n", type=int, help="number of images")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("solve", help="degrade one image and reconstruct it")
    common(p, "runs/solve")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="ground-truth image (.pgm, .ppm or .frt)")
    p.add_argument("--task", required=True, choices=sorted(TASK_PRESETS))
    p.add_argument("--formulation", default="analysis", choices=["synthesis", "analysis"])
    p.add_argument("--lam", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--optimizer", choices=["adam", "gd", "lbfgs"])
    p.add_argument("--step-size", type=float)
    p.add_argument("--tolerance", type=float, help="gradient infinity-norm stopping tolerance")
    p.add_argument("--sigma", type=float, help="observation noise level")
    p.add_argument("--noise-seed", type=int)
    p.add_argument("--fraction", type=float, help="missing fraction for inpaint_random")
    p.add_argument("--kernel", type=int, help="blur size for deblur")
    p.add_argument("--factor", type=int, help="downsampling factor for sr tasks")
    p.add_argument("--side-fraction", type=float, help="square side for inpaint_center")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("benchmark", help="all tasks, both formulations, lambda sweep")
    common(p, "runs/benchmark")
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int, help="max iterations for both formulations")
    p.add_argument("--lam", type=_floats, help="comma-separated lambda sweep")
    p.add_argument("--n-eval", type=int, help="number of test images")
    p.add_argument("--tasks", type=lambda s: s.split(","), help="comma-separated task names")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("metrics", help="PSNR and SSIM of an image against a reference")
    p.add_argument("image")
    p.add_argument("truth")
    p.add_argument("--peak", type=float, default=1.0)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except Exception as err:  # noqa: BLE001 - every failure becomes one categorised line
        for types, category, status in ERROR_CATEGORIES:
            if isinstance(err, types):
                break
        else:
            category, status = "internal", 1
        message = str(err).splitlines()[0] if str(err) else type(err).__name__
        print(f"error: {category}: {message}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return status
    return 0


if __name__ == "__main__":
    sys.exit(main())
