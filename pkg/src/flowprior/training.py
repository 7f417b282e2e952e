"""Maximum-likelihood training of the flow with Adam."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .flow import ActNorm, FlowModel, Inv1x1, actnorm_data_init
from .tensor import DTYPE, PIVOT_EPS, gaussian, log_abs_det, make_rng, SingularMatrixError

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, message, param_index=None, layer_index=None, step=None):
        super().__init__(message)
        self.param_index = param_index
        self.layer_index = layer_index
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    dequantization_levels: int = 256
    clip_norm: float = 100.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Dataset:
    train: np.ndarray  # (N, C, H, W), values in [0, 1]
    test: np.ndarray

    @property
    def shape(self):
        return tuple(self.train.shape[1:])

    @property
    def images(self):
        return list(self.train) + list(self.test)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass
class LossCurve:
    nll_nats: list = field(default_factory=list)
    bits_per_dim: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "nll_nats", "bits_per_dim"])
            for i, (n, b) in enumerate(zip(self.nll_nats, self.bits_per_dim)):
                w.writerow([i, repr(n), repr(b)])


# --- likelihood ---


def _nll_from_latent(z, logdet):
    d = z.shape[-1]
    return 0.5 * np.sum(z * z, axis=-1) + 0.5 * d * LOG_2PI - logdet


def nll(model: FlowModel, x):
    """Negative log-likelihood in nats of one image (float) or a batch (array)."""
    z, logdet = model._encode(model._as_images(x)[0])
    out = _nll_from_latent(z, logdet)
    return float(out[0]) if np.ndim(x) == 3 else out


def bits_per_dim(nll_nats, dim, levels=None):
    """Convert nats to bits/dim, adding ``log2(levels)`` for data dequantised from ``levels`` bins."""
    bpd = np.asarray(nll_nats) / (dim * math.log(2))
    if levels:
        bpd = bpd + math.log2(levels)
    return bpd


def nll_and_grad(model: FlowModel, x):
    """Per-image NLLs and gradients of their *sum* w.r.t. ``x`` and parameters."""
    xb, _ = model._as_images(x)
    trace = []
    z, logdet = model._encode(xb, trace)
    values = _nll_from_latent(z, logdet)
    gx, gp = model._encode_backward(trace, z, -np.ones(len(xb)))
    return values, gx, gp


# --- data ---


def dequantize(x, rng, levels=256):
    """Add ``U[0, 1/levels)`` noise to values on the grid ``{0, 1/L, ..., (L-1)/L}``."""
    x = np.asarray(x, dtype=DTYPE)
    return x + rng.random(x.shape) / levels


def quantize(x, levels=256):
    return np.clip(np.floor(np.asarray(x) * levels), 0, levels - 1) / levels


def _blob(yy, xx, cy, cx, ry, rx):
    return np.exp(-0.5 * (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))


def _synthetic_face(rng, shape):
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    angle = rng.uniform(0, 2 * np.pi)
    ramp = 0.5 + 0.5 * (np.cos(angle) * xx + np.sin(angle) * yy) / np.sqrt(2)
    bg_a, bg_b = rng.uniform(0.1, 0.9, size=(2, c))
    img = bg_a[:, None, None] * (1 - ramp) + bg_b[:, None, None] * ramp

    cy, cx = rng.uniform(-0.12, 0.12, size=2)
    ry, rx = rng.uniform(0.45, 0.6), rng.uniform(0.35, 0.5)
    face = _blob(yy, xx, cy, cx, ry, rx) ** 2
    skin = rng.uniform(0.55, 0.95) * np.array([1.0, 0.8, 0.65][:c] if c == 3 else [1.0] * c)
    img = img * (1 - face) + skin[:, None, None] * face

    eye_dy, eye_dx = rng.uniform(0.12, 0.22), rng.uniform(0.15, 0.25)
    eye_r = rng.uniform(0.07, 0.11)
    dark = rng.uniform(0.05, 0.25)
    eyes = _blob(yy, xx, cy - eye_dy, cx - eye_dx, eye_r, eye_r) + _blob(yy, xx, cy - eye_dy, cx + eye_dx, eye_r, eye_r)
    mouth = _blob(yy, xx, cy + rng.uniform(0.18, 0.3), cx, rng.uniform(0.05, 0.08), rng.uniform(0.1, 0.18))
    spots = np.clip(eyes + mouth, 0, 1)
    img = img * (1 - spots) + dark * spots
    return np.clip(img, 0.0, 1.0)


def _split(images):
    n = len(images)
    n_test = int(round(0.2 * n))
    if n_test < 15:
        n_test = min(15, n // 2)
    return Dataset(np.asarray(images[: n - n_test]), np.asarray(images[n - n_test:]))


def make_synthetic_dataset(rng, n, shape=(3, 16, 16), levels=256) -> Dataset:
    """Face-like smooth images (background ramp, face blob, two eyes, a mouth), quantised to ``levels``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    images = np.stack([quantize(_synthetic_face(rng, tuple(shape)), levels) for _ in range(n)])
    return _split(images)


def load_image_dir(path) -> Dataset:
    """Load every ``.pgm``, ``.ppm`` and ``.frt`` file in ``path`` (sorted by name)."""
    from .imageio import read_image

    names = sorted(n for n in os.listdir(path) if n.lower().endswith((".pgm", ".ppm", ".frt")))
    if not names:
        raise FileNotFoundError(f"no images in {path}")
    images = [read_image(os.path.join(path, n)) for n in names]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images in {path} have differing shapes {sorted(shapes)}")
    return _split(np.stack(images))


# --- optimisation ---


def adam_step(params, grads, state: AdamState, config: TrainConfig, guards=None):
    """One bias-corrected Adam update; returns ``(new_params, state)``.

    ``guards`` maps a parameter index to a predicate on the candidate value.
    A rejected candidate has its step halved (up to 30 times) and is rolled
    back entirely if it never passes.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i}", param_index=i)
    guards = guards or {}
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1 - b1**state.step
    corr2 = 1 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = config.learning_rate * (state.m[i] / corr1) / (np.sqrt(state.v[i] / corr2) + config.epsilon)
        new = p - update
        check = guards.get(i)
        if check is not None:
            for _ in range(30):
                if check(new):
                    break
                update = 0.5 * update
                new = p - update
            else:
                new = p.copy()
        out.append(new)
    return out, state


def _det_ok(w):
    try:
        logdet, _ = log_abs_det(w)
    except SingularMatrixError:
        return False
    return logdet > math.log(PIVOT_EPS)


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads


def train(model: FlowModel, dataset: Dataset, config: TrainConfig):
    """Minibatch MLE training; returns ``(model, LossCurve)``.

    Actnorm layers are data-initialised on the first (dequantised) batch
    unless the model is already initialised. The optimised loss is the mean
    NLL per dimension, so gradient magnitudes do not grow with image size.
    """
    images = np.asarray(dataset.train, dtype=DTYPE)
    if len(images) == 0:
        raise ValueError("empty training set")
    rng = make_rng(config.seed)
    levels = config.dequantization_levels
    d = model.dim
    bs = min(config.batch_size, len(images))

    order = rng.permutation(len(images))
    cursor = 0

    def next_batch():
        nonlocal order, cursor
        if cursor + bs > len(order):
            order = rng.permutation(len(images))
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        return dequantize(images[idx], rng, levels)

    batch = next_batch()
    if not model.initialized:
        actnorm_data_init(model, batch)

    owners = [li for li, layer in enumerate(model.layers) for _ in layer.param_names]
    guards = {}
    pi = 0
    for layer in model.layers:
        if isinstance(layer, Inv1x1):
            guards[pi] = _det_ok
        pi += len(layer.param_names)

    params = model.parameters()
    state = AdamState.zeros_like(params)
    curve = LossCurve()
    for step in range(config.steps):
        if step > 0:
            batch = next_batch()
        values, _, grads = nll_and_grad(model, batch)
        scale = 1.0 / (len(batch) * d)
        grads = _clip([g * scale for g in grads], config.clip_norm)
        mean_nll = float(np.mean(values))
        if not math.isfinite(mean_nll):
            raise NonFiniteGradientError(f"non-finite loss at step {step}", step=step)
        try:
            params, state = adam_step(params, grads, state, config, guards)
        except NonFiniteGradientError as err:
            err.layer_index = owners[err.param_index]
            err.step = step
            raise NonFiniteGradientError(
                f"non-finite gradient in layer {err.layer_index} at step {step}",
                err.param_index, err.layer_index, step,
            ) from err
        model.set_parameters(params)
        curve.nll_nats.append(mean_nll)
        curve.bits_per_dim.append(float(bits_per_dim(mean_nll, d, levels)))
        if step % 200 == 0:
            log.info("step %d  bits/dim %.4f", step, curve.bits_per_dim[-1])
    return model, curve
