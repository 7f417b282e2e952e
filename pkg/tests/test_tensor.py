import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowprior.tensor import (
    KernelTooLargeError,
    SingularMatrixError,
    TensorFormatError,
    conv2d,
    gaussian,
    inverse,
    log_abs_det,
    lu_decompose,
    make_rng,
    read_tensor,
    tensor_to_bytes,
    uniform,
    write_tensor,
)


def cofactor_det(m):
    n = len(m)
    if n == 1:
        return m[0][0]
    return sum((-1) ** j * m[0][j] * cofactor_det([row[:j] + row[j + 1:] for row in m[1:]]) for j in range(n))


def naive_circular_conv(x, kernel):
    # every (output, input, tap) triple; a tap contributes when its offset matches modulo the size
    h, w = x.shape
    k = kernel.shape[0]
    r = k // 2
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            for p in range(h):
                for q in range(w):
                    for a in range(k):
                        for b in range(k):
                            if (i - p) % h == (a - r) % h and (j - q) % w == (b - r) % w:
                                out[i, j] += kernel[a, b] * x[p, q]
    return out


class TestLU:
    def test_identity(self):
        perm, lower, upper = lu_decompose(np.eye(2))
        np.testing.assert_array_equal(lower, np.eye(2))
        np.testing.assert_array_equal(upper, np.eye(2))
        assert log_abs_det(np.eye(2)) == (0.0, 1)

    def test_diagonal(self):
        logdet, sign = log_abs_det(np.diag([2.0, 3.0]))
        assert logdet == pytest.approx(math.log(6), abs=1e-12)
        assert logdet == pytest.approx(1.791759, abs=1e-6)
        assert sign == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_random_4x4_against_cofactor_expansion(self, seed):
        m = gaussian(make_rng(seed), (4, 4))
        expected = cofactor_det(m.tolist())
        logdet, sign = log_abs_det(m)
        assert logdet == pytest.approx(math.log(abs(expected)), abs=1e-10)
        assert sign == (1 if expected > 0 else -1)

    @pytest.mark.parametrize("seed", range(10))
    def test_reconstruction_8x8(self, seed):
        m = gaussian(make_rng(seed), (8, 8)) + 4 * np.eye(8)
        perm, lower, upper = lu_decompose(m)
        assert np.max(np.abs(m[perm] - lower @ upper)) < 1e-10
        np.testing.assert_allclose(np.diag(lower), 1.0)
        np.testing.assert_allclose(inverse(m) @ m, np.eye(8), atol=1e-10)

    def test_singular(self):
        with pytest.raises(SingularMatrixError):
            lu_decompose(np.array([[1.0, 2.0], [2.0, 4.0]]))


class TestConv2d:
    def test_constant_image(self):
        x = np.full((2, 9, 9), 0.37)
        np.testing.assert_allclose(conv2d(x, np.full((7, 7), 1 / 49)), 0.37, atol=1e-15)

    def test_impulse_response_wraps(self):
        x = np.zeros((1, 6, 6))
        x[0, 0, 0] = 1.0
        out = conv2d(x, np.full((3, 3), 1 / 9))[0]
        for i in (-1, 0, 1):
            for j in (-1, 0, 1):
                assert out[i % 6, j % 6] == pytest.approx(1 / 9)
        assert out.sum() == pytest.approx(1.0)
        assert np.count_nonzero(np.abs(out) > 1e-15) == 9

    def test_centered_impulse(self):
        x = np.zeros((1, 5, 5))
        x[0, 2, 2] = 1.0
        out = conv2d(x, np.full((3, 3), 1 / 9))[0]
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1 / 9
        np.testing.assert_allclose(out, expected, atol=1e-15)

    @pytest.mark.parametrize("k", [3, 5])
    def test_against_naive_loop(self, k):
        rng = make_rng(11 + k)
        x = gaussian(rng, (1, 8, 8))
        kernel = gaussian(rng, (k, k))
        expected = naive_circular_conv(x[0], kernel)
        assert np.max(np.abs(conv2d(x, kernel)[0] - expected)) < 1e-12

    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, seed, alpha, beta):
        rng = make_rng(seed)
        x, y = gaussian(rng, (2, 7, 9)), gaussian(rng, (2, 7, 9))
        kernel = gaussian(rng, (5, 5))
        lhs = conv2d(alpha * x + beta * y, kernel)
        rhs = alpha * conv2d(x, kernel) + beta * conv2d(y, kernel)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_kernel_too_large(self):
        with pytest.raises(KernelTooLargeError):
            conv2d(np.zeros((1, 4, 8)), np.ones((5, 5)))


class TestRandom:
    def test_determinism(self):
        np.testing.assert_array_equal(gaussian(make_rng(0), [4]), gaussian(make_rng(0), [4]))
        np.testing.assert_array_equal(uniform(make_rng(0), [4]), uniform(make_rng(0), [4]))

    def test_gaussian_moments(self):
        s = gaussian(make_rng(1), (10**6,))
        assert abs(s.mean()) < 0.01
        assert abs(s.var() - 1) < 0.02

    def test_uniform_range(self):
        s = uniform(make_rng(2), (10**6,), 0.0, 1.0)
        assert s.min() >= 0.0 and s.max() < 1.0

    def test_empty_shape_rejected(self):
        with pytest.raises(ValueError):
            gaussian(make_rng(0), ())


class TestBinaryFormat:
    def test_layout(self):
        t = np.arange(6.0).reshape(2, 3)
        raw = tensor_to_bytes(t)
        assert raw[:4] == b"FRT1"
        assert raw[4:8] == (2).to_bytes(4, "little")
        assert raw[8:16] == (2).to_bytes(8, "little")
        assert raw[16:24] == (3).to_bytes(8, "little")
        assert np.frombuffer(raw[24:], "<f8").tolist() == t.ravel().tolist()

    def test_round_trip(self):
        t = gaussian(make_rng(3), (3, 4, 5))
        buf = io.BytesIO()
        write_tensor(buf, t)
        buf.seek(0)
        np.testing.assert_array_equal(read_tensor(buf), t)

    def test_bad_magic(self):
        with pytest.raises(TensorFormatError):
            read_tensor(io.BytesIO(b"XXXX" + bytes(12)))

    def test_truncated(self):
        raw = tensor_to_bytes(np.ones(4))
        with pytest.raises(TensorFormatError):
            read_tensor(io.BytesIO(raw[:-3]))
