"""Synthesis and analysis reconstruction with a flow prior.

synthesis:  z* = argmin_z  1/2 ||A D(z) - y||^2 + lam ||z||^2,   x = D(z*)
analysis:   x* = argmin_x  1/2 ||A x - y||^2    + lam ||E(x)||^2

Both are solved by first-order descent from ``z0 = 0`` and ``x0 = D(0)``.
Every routine is batched: a stack of observations sharing one operator is
solved at once, each image with its own stopping state, and ``lam`` may be
given per image.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .flow import FlowModel
from .operators import LinearOperator, ProblemSpec
from .tensor import DTYPE, ShapeMismatchError, save_tensor

ARMIJO_C = 1e-4
MAX_HALVINGS = 60
LBFGS_RESTARTS = 5


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class SolverConfig:
    lam: float = 1e-4
    max_iters: int = 3000
    optimizer: str = "adam"  # "adam", "gd" or "lbfgs"
    step_size: float = 1e-2
    grad_tolerance: float = 1e-7
    backtracking: bool = True  # gd only
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    encoder_init: bool = False  # synthesis only: z0 = E(A^T y) instead of 0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.optimizer not in ("adam", "gd", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class SolveReport:
    reconstruction: np.ndarray
    formulation: str
    lam: float
    data_trace: list = field(default_factory=list)
    reg_trace: list = field(default_factory=list)
    objective_trace: list = field(default_factory=list)
    iterations_run: int = 0
    terminated_by: str = "max_iters"
    wall_time: float = 0.0

    def sidecar(self):
        meta = asdict(self)
        meta.pop("reconstruction")
        return meta

    def save(self, tensor_path, json_path):
        save_tensor(tensor_path, self.reconstruction)
        with open(json_path, "w") as f:
            json.dump(self.sidecar(), f, indent=1)


def _lam_column(lam, n):
    lam = np.broadcast_to(np.asarray(lam, dtype=DTYPE), (n,))
    return lam


def _batch(a, shape):
    a = np.asarray(a, dtype=DTYPE)
    if a.shape == tuple(shape):
        return a[None], True
    if a.shape[1:] == tuple(shape):
        return a, False
    raise ShapeMismatchError(f"expected shape {tuple(shape)} or a batch of it, got {a.shape}")


def _sumsq(a):
    return np.sum(a.reshape(len(a), -1) ** 2, axis=1)


def _synthesis_terms(model, op, y, z, lam, need_grad=True):
    trace = [] if need_grad else None
    x = model._decode(z, trace)
    r = op.apply(x) - y
    data = 0.5 * _sumsq(r)
    reg = lam * _sumsq(z)
    if not need_grad:
        return data, reg, None
    gz, _ = model._decode_backward(trace, op.adjoint(r), params=False)
    return data, reg, gz + 2 * lam[:, None] * z


def _analysis_terms(model, op, y, x, lam, need_grad=True):
    r = op.apply(x) - y
    data = 0.5 * _sumsq(r)
    if not np.any(lam):
        return data, np.zeros(len(x)), (op.adjoint(r) if need_grad else None)
    trace = [] if need_grad else None
    z, _ = model._encode(x, trace)
    reg = lam * _sumsq(z)
    if not need_grad:
        return data, reg, None
    gx, _ = model._encode_backward(trace, 2 * lam[:, None] * z, np.zeros(len(x)), params=False)
    return data, reg, op.adjoint(r) + gx


def synthesis_objective(model: FlowModel, op: LinearOperator, y, z, lam):
    """Value and latent gradient of the synthesis objective (single or batched)."""
    yb, _ = _batch(y, op.output_shape)
    zb, single = _batch(z, (model.dim,))
    data, reg, g = _synthesis_terms(model, op, yb, zb, _lam_column(lam, len(zb)))
    total = data + reg
    return (float(total[0]), g[0]) if single else (total, g)


def analysis_objective(model: FlowModel, op: LinearOperator, y, x, lam):
    """Value and image gradient of the analysis objective (single or batched)."""
    yb, _ = _batch(y, op.output_shape)
    xb, single = _batch(x, op.input_shape)
    data, reg, g = _analysis_terms(model, op, yb, xb, _lam_column(lam, len(xb)))
    total = data + reg
    return (float(total[0]), g[0]) if single else (total, g)


@dataclass
class DescentResult:
    x: np.ndarray
    data_trace: list
    reg_trace: list
    iterations: np.ndarray
    terminated_by: list


def _descend_lbfgs(terms, x0, config):
    # the batch is minimised jointly as the sum of its (independent) objectives
    shape = x0.shape
    n = len(x0)
    data_trace = [[] for _ in range(n)]
    reg_trace = [[] for _ in range(n)]

    def record(x):
        data, reg, _ = terms(x, False)
        if not np.all(np.isfinite(data + reg)):
            raise NonFiniteObjectiveError(f"non-finite objective at iteration {len(data_trace[0]) - 1}",
                                          len(data_trace[0]) - 1)
        for i in range(n):
            data_trace[i].append(float(data[i]))
            reg_trace[i].append(float(reg[i]))

    def fun(v):
        data, reg, g = terms(v.reshape(shape), True)
        total = float(np.sum(data + reg))
        return (total, g.ravel()) if np.isfinite(total) else (np.inf, np.zeros(v.size))

    record(x0)
    v = np.asarray(x0, dtype=DTYPE).ravel()
    nit = 0
    # a failed line search usually means stale curvature pairs; restart a few times
    for _ in range(1 + LBFGS_RESTARTS):
        res = minimize(
            fun, v, jac=True, method="L-BFGS-B",
            callback=lambda w: record(w.reshape(shape)),
            options={"maxiter": config.max_iters - nit, "gtol": config.grad_tolerance, "ftol": 0.0, "maxcor": 20},
        )
        progressed = res.nit > 0
        v, nit = res.x, nit + res.nit
        gmax = np.max(np.abs(terms(v.reshape(shape), True)[2]))
        if res.status == 1 or nit >= config.max_iters:
            stop = "max_iters"
            break
        if gmax < config.grad_tolerance:
            stop = "tolerance"
            break
        stop = "stalled"  # line search could make no further progress
        if not progressed:
            break
    return DescentResult(v.reshape(shape), data_trace, reg_trace, np.full(n, nit), [stop] * n)


def descend(terms, x0, config: SolverConfig) -> DescentResult:
    """Minimise a batch of independent objectives.

    ``terms(x, need_grad)`` returns per-item ``(data, reg, grad)`` arrays.
    With Adam or gradient descent each item stops once its gradient
    infinity-norm drops below ``config.grad_tolerance`` and is frozen from
    then on. L-BFGS minimises the summed objective of the whole batch.
    Raises :class:`NonFiniteObjectiveError` on a non-finite objective.
    """
    if config.optimizer == "lbfgs":
        return _descend_lbfgs(terms, np.array(x0, dtype=DTYPE), config)
    x = np.array(x0, dtype=DTYPE)
    n = len(x)
    axes = tuple(range(1, x.ndim))
    col = (slice(None),) + (None,) * (x.ndim - 1)
    active = np.ones(n, dtype=bool)
    iterations = np.zeros(n, dtype=int)
    stop = ["max_iters"] * n
    data, reg, g = terms(x, True)
    data_trace = [[v] for v in data]
    reg_trace = [[v] for v in reg]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    lr = config.step_size

    for it in range(config.max_iters):
        total = data + reg
        if not np.all(np.isfinite(total[active])):
            raise NonFiniteObjectiveError(f"non-finite objective at iteration {it}", it)
        gmax = np.max(np.abs(g), axis=axes)
        for i in np.flatnonzero(active & (gmax < config.grad_tolerance)):
            active[i] = False
            stop[i] = "tolerance"
        if not active.any():
            break

        if config.optimizer == "adam":
            t = it + 1
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g * g
            step = lr * (m / (1 - config.beta1**t)) / (np.sqrt(v / (1 - config.beta2**t)) + config.epsilon)
            x_new = np.where(active[col], x - step, x)
            d_new, r_new, g_new = terms(x_new, True)
        elif not config.backtracking:
            x_new = np.where(active[col], x - lr * g, x)
            d_new, r_new, g_new = terms(x_new, True)
        else:
            gsq = np.sum(g * g, axis=axes)
            t_step = np.where(active, lr, 0.0)
            pending = active.copy()
            x_new = x.copy()
            d_new, r_new = data.copy(), reg.copy()
            for _ in range(MAX_HALVINGS):
                cand = x - t_step[col] * g
                d_c, r_c, _ = terms(cand, False)
                ok = pending & ((d_c + r_c) <= total - ARMIJO_C * t_step * gsq)
                x_new[ok] = cand[ok]
                d_new[ok], r_new[ok] = d_c[ok], r_c[ok]
                pending &= ~ok
                if not pending.any():
                    break
                t_step = np.where(pending, 0.5 * t_step, 0.0)
            # items still pending could not decrease and stay where they are
            _, _, g_new = terms(x_new, True)

        moved = active.copy()
        x = x_new
        data = np.where(moved, d_new, data)
        reg = np.where(moved, r_new, reg)
        g = g_new
        iterations[moved] += 1
        for i in np.flatnonzero(moved):
            data_trace[i].append(float(data[i]))
            reg_trace[i].append(float(reg[i]))

    total = data + reg
    if not np.all(np.isfinite(total)):
        raise NonFiniteObjectiveError("non-finite objective at the final iterate", config.max_iters)
    return DescentResult(x, data_trace, reg_trace, iterations, stop)


def _reports(result, images, formulation, lam, wall):
    out = []
    for i in range(len(images)):
        data = [float(v) for v in result.data_trace[i]]
        reg = [float(v) for v in result.reg_trace[i]]
        out.append(SolveReport(
            reconstruction=images[i],
            formulation=formulation,
            lam=float(lam[i]),
            data_trace=data,
            reg_trace=reg,
            objective_trace=[a + b for a, b in zip(data, reg)],
            iterations_run=int(result.iterations[i]),
            terminated_by=result.terminated_by[i],
            wall_time=wall,
        ))
    return out


def _run(terms, x0, config):
    """``descend`` with one restart at a tenth of the step size if Adam blows up."""
    try:
        return descend(terms, x0, config)
    except NonFiniteObjectiveError:
        if config.optimizer != "adam":
            raise
    retry = SolverConfig(**{**asdict(config), "step_size": config.step_size * 0.1})
    return descend(terms, x0, retry)


def solve_synthesis_batch(model: FlowModel, op: LinearOperator, ys, config: SolverConfig, lam=None):
    """Solve the synthesis problem for each observation in ``ys``; returns a list of reports."""
    ys, _ = _batch(ys, op.output_shape)
    lam = _lam_column(config.lam if lam is None else lam, len(ys))
    start = time.perf_counter()
    if config.encoder_init:
        z0 = model._encode(op.adjoint(ys))[0]
    else:
        z0 = np.zeros((len(ys), model.dim))
    result = _run(lambda z, need: _synthesis_terms(model, op, ys, z, lam, need), z0, config)
    images = model._decode(result.x)
    return _reports(result, images, "synthesis", lam, time.perf_counter() - start)


def solve_analysis_batch(model: FlowModel, op: LinearOperator, ys, config: SolverConfig, lam=None):
    """Solve the analysis problem for each observation in ``ys``; returns a list of reports."""
    ys, _ = _batch(ys, op.output_shape)
    lam = _lam_column(config.lam if lam is None else lam, len(ys))
    start = time.perf_counter()
    x0 = np.repeat(model._decode(np.zeros((1, model.dim))), len(ys), axis=0)
    result = _run(lambda x, need: _analysis_terms(model, op, ys, x, lam, need), x0, config)
    return _reports(result, result.x, "analysis", lam, time.perf_counter() - start)


def solve_synthesis(model: FlowModel, problem: ProblemSpec, config: SolverConfig) -> SolveReport:
    return solve_synthesis_batch(model, problem.operator, problem.observed, config)[0]


def solve_analysis(model: FlowModel, problem: ProblemSpec, config: SolverConfig) -> SolveReport:
    return solve_analysis_batch(model, problem.operator, problem.observed, config)[0]


def solve(model, problem, config, formulation):
    if formulation == "synthesis":
        return solve_synthesis(model, problem, config)
    if formulation == "analysis":
        return solve_analysis(model, problem, config)
    raise ValueError(f"unknown formulation {formulation!r}")
