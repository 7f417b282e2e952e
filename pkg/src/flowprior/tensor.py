"""Dense float64 array helpers: seeded RNG, LU decomposition, circular
convolution and the ``FRT1`` binary tensor format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

DTYPE = np.float64
TENSOR_MAGIC = b"FRT1"
PIVOT_EPS = 1e-12


class ShapeMismatchError(ValueError):
    pass


class SingularMatrixError(ValueError):
    pass


class KernelTooLargeError(ValueError):
    pass


class TensorFormatError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    shape = tuple(shape)
    if not shape:
        raise ValueError("shape must be nonempty")
    return rng.standard_normal(shape, dtype=DTYPE)


def uniform(rng: np.random.Generator, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    shape = tuple(shape)
    if not shape:
        raise ValueError("shape must be nonempty")
    return rng.uniform(lo, hi, size=shape)


def lu_decompose(m: np.ndarray):
    """LU factorisation with partial pivoting.

    Returns ``(perm, lower, upper)`` with ``m[perm] == lower @ upper`` and
    ``lower`` unit lower-triangular. ``perm`` is an index array; its parity
    gives the determinant sign (see :func:`log_abs_det`).
    """
    a = np.array(m, dtype=DTYPE)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
    n = a.shape[0]
    perm = np.arange(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < PIVOT_EPS:
            raise SingularMatrixError(f"pivot {k} has magnitude {abs(a[p, k]):.3e}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    lower = np.tril(a, -1) + np.eye(n)
    upper = np.triu(a)
    return perm, lower, upper


def permutation_sign(perm: np.ndarray) -> int:
    seen = np.zeros(len(perm), dtype=bool)
    sign = 1
    for start in range(len(perm)):
        if seen[start]:
            continue
        length = 0
        j = start
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def log_abs_det(m: np.ndarray) -> tuple[float, int]:
    """``(log|det m|, sign(det m))`` via :func:`lu_decompose`."""
    perm, _, upper = lu_decompose(m)
    diag = np.diag(upper)
    sign = permutation_sign(perm) * int(np.prod(np.sign(diag)))
    return float(np.sum(np.log(np.abs(diag)))), sign


def lu_solve(lu, b: np.ndarray) -> np.ndarray:
    """Solve ``m x = b`` given ``lu = lu_decompose(m)``; ``b`` may be a matrix."""
    perm, lower, upper = lu
    x = np.array(b, dtype=DTYPE)[perm]
    n = lower.shape[0]
    for i in range(n):
        x[i] -= lower[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - upper[i, i + 1:] @ x[i + 1:]) / upper[i, i]
    return x


def inverse(m: np.ndarray) -> np.ndarray:
    return lu_solve(lu_decompose(m), np.eye(np.shape(m)[0]))


def conv2d(x: np.ndarray, kernel: np.ndarray, boundary: str = "circular") -> np.ndarray:
    """Per-channel 2-D convolution with periodic boundary.

    ``x`` has shape ``(..., H, W)``; leading axes (channels, batch) are
    convolved independently with the same odd ``k x k`` kernel.
    """
    if boundary != "circular":
        raise ValueError(f"unsupported boundary {boundary!r}")
    x = np.asarray(x, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    k = kernel.shape[0]
    if kernel.shape != (k, k) or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    h, w = x.shape[-2:]
    if k > min(h, w):
        raise KernelTooLargeError(f"kernel {k}x{k} larger than image {h}x{w}")
    r = k // 2
    out = np.zeros_like(x)
    # out[i, j] = sum_{a,b} kernel[a, b] * x[i - (a - r), j - (b - r)]
    for a in range(k):
        rows = np.roll(x, a - r, axis=-2)
        for b in range(k):
            if kernel[a, b] != 0.0:
                out += kernel[a, b] * np.roll(rows, b - r, axis=-1)
    return out


def write_tensor(f: BinaryIO, t: np.ndarray) -> None:
    t = np.ascontiguousarray(t, dtype="<f8")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", t.ndim))
    f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    f.write(t.tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    head = f.read(4)
    if len(head) != 4:
        raise TensorFormatError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    raw = f.read(8 * rank)
    if len(raw) != 8 * rank:
        raise TensorFormatError("truncated tensor shape")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape, dtype=np.int64))
    data = f.read(8 * count)
    if len(data) != 8 * count:
        raise TensorFormatError("truncated tensor data")
    return np.frombuffer(data, dtype="<f8").astype(DTYPE).reshape(shape)


def tensor_to_bytes(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def save_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
