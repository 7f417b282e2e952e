"""Linear degradation operators with exact adjoints, and noisy observations.

All operators act on arrays shaped ``(..., C, H, W)``; leading axes are
treated as a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeMismatchError, conv2d, gaussian, make_rng


@dataclass(frozen=True)
class LinearOperator:
    kind: str  # identity | blur | mask | downsample
    input_shape: tuple
    output_shape: tuple
    kernel: np.ndarray | None = None
    mask: np.ndarray | None = None  # (H, W) of 0/1, shared across channels
    factor: int = 1
    descriptor: dict = field(default_factory=dict, compare=False)

    def _check(self, x, shape):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-3:] != tuple(shape):
            raise ShapeMismatchError(f"{self.kind}: expected trailing shape {tuple(shape)}, got {x.shape}")
        return x

    def apply(self, x):
        x = self._check(x, self.input_shape)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "blur":
            return conv2d(x, self.kernel)
        if self.kind == "mask":
            return x * self.mask
        if self.kind == "downsample":
            f = self.factor
            *lead, c, h, w = x.shape
            return x.reshape(*lead, c, h // f, f, w // f, f).mean(axis=(-3, -1))
        raise ValueError(f"unknown operator kind {self.kind!r}")

    def adjoint(self, u):
        u = self._check(u, self.output_shape)
        if self.kind == "identity":
            return u.copy()
        if self.kind == "blur":
            return conv2d(u, self.kernel[::-1, ::-1])
        if self.kind == "mask":
            return u * self.mask
        if self.kind == "downsample":
            f = self.factor
            up = np.repeat(np.repeat(u, f, axis=-2), f, axis=-1)
            return up / (f * f)
        raise ValueError(f"unknown operator kind {self.kind!r}")

    __call__ = apply


def identity(shape) -> LinearOperator:
    shape = tuple(shape)
    return LinearOperator("identity", shape, shape, descriptor={"kind": "identity"})


def blur(shape, k=7) -> LinearOperator:
    """Uniform ``k x k`` blur with circular boundary."""
    shape = tuple(shape)
    if k % 2 == 0 or k > min(shape[-2:]):
        raise ValueError(f"blur size {k} must be odd and fit in {shape[-2:]}")
    kernel = np.full((k, k), 1.0 / (k * k))
    return LinearOperator("blur", shape, shape, kernel=kernel, descriptor={"kind": "blur", "k": k})


def downsample(shape, factor) -> LinearOperator:
    """``factor x factor`` block averaging."""
    c, h, w = shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeMismatchError(f"factor {factor} must divide {h}x{w}")
    return LinearOperator(
        "downsample", (c, h, w), (c, h // factor, w // factor), factor=factor,
        descriptor={"kind": "downsample", "factor": factor},
    )


def mask_operator(shape, mask, descriptor=None) -> LinearOperator:
    shape = tuple(shape)
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != shape[-2:]:
        raise ShapeMismatchError(f"mask shape {mask.shape} does not match image {shape[-2:]}")
    return LinearOperator("mask", shape, shape, mask=mask, descriptor=descriptor or {"kind": "mask"})


def make_random_mask(rng, shape, missing_fraction) -> LinearOperator:
    """Zero exactly ``round(missing_fraction * H * W)`` pixel sites, chosen uniformly."""
    if not 0 <= missing_fraction < 1:
        raise ValueError("missing_fraction must lie in [0, 1)")
    h, w = shape[-2:]
    n_missing = int(round(missing_fraction * h * w))
    mask = np.ones(h * w)
    mask[rng.permutation(h * w)[:n_missing]] = 0.0
    return mask_operator(shape, mask.reshape(h, w))


def make_center_mask(shape, side_fraction) -> LinearOperator:
    """Zero a centred square of side ``round(side_fraction * min(H, W))``.

    When the leftover margin is odd the square sits one pixel toward the
    top-left.
    """
    if not 0 < side_fraction < 1:
        raise ValueError("side_fraction must lie in (0, 1)")
    h, w = shape[-2:]
    side = int(round(side_fraction * min(h, w)))
    mask = np.ones((h, w))
    top, left = (h - side) // 2, (w - side) // 2
    mask[top:top + side, left:left + side] = 0.0
    return mask_operator(shape, mask, descriptor={"kind": "center_mask", "side_fraction": side_fraction})


def from_descriptor(descriptor: dict, shape) -> LinearOperator:
    """Rebuild an operator from its serialised ``kind`` + parameters (+ seed)."""
    kind = descriptor["kind"]
    if kind == "identity":
        return identity(shape)
    if kind == "blur":
        return blur(shape, int(descriptor["k"]))
    if kind == "downsample":
        return downsample(shape, int(descriptor["factor"]))
    if kind == "random_mask":
        op = make_random_mask(make_rng(int(descriptor["seed"])), shape, float(descriptor["fraction"]))
        return mask_operator(shape, op.mask, descriptor=dict(descriptor))
    if kind == "center_mask":
        return make_center_mask(shape, float(descriptor["side_fraction"]))
    raise ValueError(f"unknown operator kind {kind!r}")


def random_mask(shape, fraction, seed) -> LinearOperator:
    """Seeded random mask that remembers how to rebuild itself."""
    return from_descriptor({"kind": "random_mask", "fraction": fraction, "seed": int(seed)}, shape)


@dataclass
class ProblemSpec:
    operator: LinearOperator
    noise_sigma: float
    observed: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        if self.observed.shape[-3:] != tuple(self.operator.output_shape):
            raise ShapeMismatchError("observed shape does not match operator output")


def degrade(op: LinearOperator, truth, noise_sigma, rng) -> ProblemSpec:
    """``y = A(truth) + noise_sigma * n`` with ``n`` standard Gaussian."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    truth = np.asarray(truth, dtype=DTYPE)
    y = op.apply(truth)
    if noise_sigma > 0:
        y = y + noise_sigma * gaussian(rng, y.shape)
    return ProblemSpec(op, float(noise_sigma), y, truth)
