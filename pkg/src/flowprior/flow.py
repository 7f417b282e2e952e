"""Glow-style invertible flow with additive couplings.

Every layer works on batched arrays of shape ``(N, C, H, W)`` and exposes

* ``forward(x) -> (y, logdet)`` with ``logdet`` of shape ``(N,)``
* ``inverse(y) -> x``
* ``forward_vjp(x, gy, glogdet, params=True) -> (gx, param_grads)``
* ``inverse_vjp(y, gx, params=True) -> (gy, param_grads)``

``param_grads`` is empty when ``params`` is false. Gradients of anything
built from :func:`encode` and :func:`decode` are exact reverse sweeps
through the layer stack.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeMismatchError, gaussian, inverse, log_abs_det, make_rng, read_tensor, write_tensor

CHECKPOINT_MAGIC = b"FRCK"
CHECKPOINT_VERSION = 1


class ZeroVarianceError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


# --- small conv-net primitives (zero "same" padding, cross-correlation) ---


def _im2col(x):
    """``(N, 9C, H*W)`` patches ordered (tap row, tap col, channel)."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, 3, 3, c, h, w))
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, 9 * c, h * w)


def conv3x3(x, w, b):
    n, _, h, width = x.shape
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
    out = np.matmul(wmat, _im2col(x))
    return out.reshape(n, -1, h, width) + b[None, :, None, None]


def conv3x3_vjp(x, w, gout, params=True):
    """Returns ``(gx, gw, gb)`` for ``conv3x3(x, w, b)`` and cotangent ``gout``.

    ``gw`` and ``gb`` are ``None`` when ``params`` is false.
    """
    gw = gb = None
    if params:
        o, c = w.shape[:2]
        g = gout.reshape(len(gout), o, -1)
        gw = np.tensordot(g, _im2col(x), axes=([0, 2], [0, 2])).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
        gb = gout.sum(axis=(0, 2, 3))
    w_adj = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gx = conv3x3(gout, w_adj, np.zeros(w.shape[1]))
    return gx, gw, gb


def squeeze2(x):
    n, c, h, w = x.shape
    x = x.reshape(n, c, h // 2, 2, w // 2, 2)
    return x.transpose(0, 1, 3, 5, 2, 4).reshape(n, 4 * c, h // 2, w // 2)


def unsqueeze2(x):
    n, c, h, w = x.shape
    x = x.reshape(n, c // 4, 2, 2, h, w)
    return x.transpose(0, 1, 4, 2, 5, 3).reshape(n, c // 4, 2 * h, 2 * w)


# --- layers ---


class ActNorm:
    """Per-channel ``y = exp(log_scale) * x + bias``."""

    kind = "actnorm"
    param_names = ("log_scale", "bias")

    def __init__(self, channels):
        self.log_scale = np.zeros(channels)
        self.bias = np.zeros(channels)
        self.initialized = False

    def _sb(self):
        return np.exp(self.log_scale)[None, :, None, None], self.bias[None, :, None, None]

    def forward(self, x):
        s, b = self._sb()
        hw = x.shape[2] * x.shape[3]
        logdet = np.full(x.shape[0], hw * self.log_scale.sum())
        return s * x + b, logdet

    def inverse(self, y):
        s, b = self._sb()
        return (y - b) / s

    def forward_vjp(self, x, gy, glogdet, params=True):
        s, _ = self._sb()
        if not params:
            return gy * s, []
        hw = x.shape[2] * x.shape[3]
        g_ls = (gy * s * x).sum(axis=(0, 2, 3)) + hw * np.sum(glogdet)
        g_b = gy.sum(axis=(0, 2, 3))
        return gy * s, [g_ls, g_b]

    def inverse_vjp(self, y, gx, params=True):
        s, b = self._sb()
        gy = gx / s
        if not params:
            return gy, []
        x = (y - b) / s
        return gy, [-(gx * x).sum(axis=(0, 2, 3)), -gy.sum(axis=(0, 2, 3))]

    def data_init(self, x):
        mean = x.mean(axis=(0, 2, 3))
        std = np.sqrt(((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3)))
        if np.any(std < 1e-8):
            raise ZeroVarianceError(f"channel(s) {np.flatnonzero(std < 1e-8).tolist()} have zero variance")
        self.log_scale = -np.log(std)
        self.bias = -mean / std
        self.initialized = True


class Inv1x1:
    """Channel mixing ``y[:, :, h, w] = W @ x[:, :, h, w]`` with a dense matrix."""

    kind = "inv1x1"
    param_names = ("weight",)

    def __init__(self, channels, weight=None):
        self.weight = np.eye(channels) if weight is None else np.array(weight, dtype=DTYPE)
        self._cached = None
        self._cache = None

    def _factors(self):
        # (log|det W|, W^-1), recomputed only when the weight changes
        if self._cached is None or not np.array_equal(self._cached, self.weight):
            logdet, _ = log_abs_det(self.weight)
            self._cache = (logdet, inverse(self.weight))
            self._cached = self.weight.copy()
        return self._cache

    @staticmethod
    def _mix(m, x):
        n, c, h, w = x.shape
        return (m @ x.reshape(n, c, h * w)).reshape(n, -1, h, w)

    def forward(self, x):
        logdet, _ = self._factors()
        hw = x.shape[2] * x.shape[3]
        return self._mix(self.weight, x), np.full(x.shape[0], hw * logdet)

    def inverse(self, y):
        return self._mix(self._factors()[1], y)

    def forward_vjp(self, x, gy, glogdet, params=True):
        if not params:
            return self._mix(self.weight.T, gy), []
        n, c, h, w = x.shape
        xr = x.reshape(n, c, h * w)
        gr = gy.reshape(n, c, h * w)
        g_w = np.einsum("nip,njp->ij", gr, xr)
        g_w += h * w * np.sum(glogdet) * self._factors()[1].T
        return self._mix(self.weight.T, gy), [g_w]

    def inverse_vjp(self, y, gx, params=True):
        w_inv = self._factors()[1]
        gy = self._mix(w_inv.T, gx)
        if not params:
            return gy, []
        x = self._mix(w_inv, y)
        n, c, h, w = y.shape
        g_w = -np.einsum("nip,njp->ij", gy.reshape(n, c, h * w), x.reshape(n, c, h * w))
        return gy, [g_w]


class AdditiveCoupling:
    """``y_b = x_b + net(x_a)`` where ``x_a`` / ``x_b`` are the first / second channel halves.

    ``net`` is conv3x3 -> tanh -> conv3x3, the last conv zero-initialised so
    a fresh layer is the identity.
    """

    kind = "coupling"
    param_names = ("w1", "b1", "w2", "b2")

    def __init__(self, channels, hidden, rng=None):
        if channels % 2:
            raise ValueError("coupling needs an even channel count")
        half = channels // 2
        rng = make_rng(0) if rng is None else rng
        self.w1 = gaussian(rng, (hidden, half, 3, 3)) / np.sqrt(9 * half)
        self.b1 = np.zeros(hidden)
        self.w2 = np.zeros((half, hidden, 3, 3))
        self.b2 = np.zeros(half)

    def _net(self, xa):
        act = np.tanh(conv3x3(xa, self.w1, self.b1))
        return conv3x3(act, self.w2, self.b2), act

    def _net_vjp(self, xa, gshift, params=True):
        act = np.tanh(conv3x3(xa, self.w1, self.b1))
        g_act, g_w2, g_b2 = conv3x3_vjp(act, self.w2, gshift, params)
        g_pre = g_act * (1.0 - act * act)
        g_xa, g_w1, g_b1 = conv3x3_vjp(xa, self.w1, g_pre, params)
        return g_xa, ([g_w1, g_b1, g_w2, g_b2] if params else [])

    def forward(self, x):
        half = x.shape[1] // 2
        xa, xb = x[:, :half], x[:, half:]
        shift, _ = self._net(xa)
        return np.concatenate([xa, xb + shift], axis=1), np.zeros(x.shape[0])

    def inverse(self, y):
        half = y.shape[1] // 2
        ya, yb = y[:, :half], y[:, half:]
        shift, _ = self._net(ya)
        return np.concatenate([ya, yb - shift], axis=1)

    def forward_vjp(self, x, gy, glogdet, params=True):
        half = x.shape[1] // 2
        gya, gyb = gy[:, :half], gy[:, half:]
        g_xa, pgrads = self._net_vjp(x[:, :half], gyb, params)
        return np.concatenate([gya + g_xa, gyb], axis=1), pgrads

    def inverse_vjp(self, y, gx, params=True):
        half = y.shape[1] // 2
        gxa, gxb = gx[:, :half], gx[:, half:]
        g_ya, pgrads = self._net_vjp(y[:, :half], gxb, params)
        return np.concatenate([gxa - g_ya, gxb], axis=1), [-g for g in pgrads]


def _params(layer):
    return [getattr(layer, name) for name in layer.param_names]


@dataclass
class Block:
    layers: list
    split: bool


@dataclass
class FlowModel:
    """Stack of blocks ``squeeze -> steps x [actnorm, 1x1, coupling] -> split?``.

    Every block but the last factors out the second channel half to the
    latent. The flat latent is the concatenation of the factored parts in
    block order followed by the final output, each flattened row-major.
    """

    input_shape: tuple
    n_blocks: int
    n_steps: int
    hidden: int
    blocks: list = field(default_factory=list)

    @classmethod
    def create(cls, input_shape, n_blocks=2, n_steps=8, hidden=16, seed=0, orthogonal=True):
        """Build a fresh model.

        With ``orthogonal=False`` the 1x1 weights are identities and the
        whole model is the identity up to a fixed permutation of entries.
        """
        c, h, w = (int(v) for v in input_shape)
        if h % 2**n_blocks or w % 2**n_blocks:
            raise ShapeMismatchError(f"H and W must be divisible by {2**n_blocks}")
        rng = make_rng(seed)
        model = cls((c, h, w), n_blocks, n_steps, hidden)
        for b in range(n_blocks):
            c *= 4
            layers = []
            for _ in range(n_steps):
                weight = None
                if orthogonal:
                    q, r = np.linalg.qr(gaussian(rng, (c, c)))
                    weight = q * np.sign(np.diag(r))[None, :]
                layers += [ActNorm(c), Inv1x1(c, weight), AdditiveCoupling(c, hidden, rng)]
            split = b < n_blocks - 1
            model.blocks.append(Block(layers, split))
            if split:
                c //= 2
        return model

    @property
    def dim(self):
        return int(np.prod(self.input_shape))

    @property
    def layers(self):
        return [layer for block in self.blocks for layer in block.layers]

    @property
    def initialized(self):
        return all(l.initialized for l in self.layers if isinstance(l, ActNorm))

    def parameters(self):
        return [p for layer in self.layers for p in _params(layer)]

    def set_parameters(self, params):
        params = list(params)
        i = 0
        for layer in self.layers:
            for name in layer.param_names:
                old = getattr(layer, name)
                if params[i].shape != old.shape:
                    raise ShapeMismatchError(f"parameter {i}: {params[i].shape} != {old.shape}")
                setattr(layer, name, np.array(params[i], dtype=DTYPE))
                i += 1
        if i != len(params):
            raise ShapeMismatchError(f"expected {i} parameter arrays, got {len(params)}")

    def latent_shapes(self):
        c, h, w = self.input_shape
        shapes = []
        for block in self.blocks:
            c, h, w = 4 * c, h // 2, w // 2
            if block.split:
                shapes.append((c - c // 2, h, w))
                c //= 2
        shapes.append((c, h, w))
        return shapes

    def descriptor(self):
        return {
            "input_shape": list(self.input_shape),
            "blocks": self.n_blocks,
            "steps": self.n_steps,
            "hidden": self.hidden,
            "initialized": self.initialized,
        }

    def copy(self):
        other = FlowModel.create(self.input_shape, self.n_blocks, self.n_steps, self.hidden, orthogonal=False)
        other.set_parameters([p.copy() for p in self.parameters()])
        for a, b in zip(self.layers, other.layers):
            if isinstance(a, ActNorm):
                b.initialized = a.initialized
        return other

    # --- passes on batched arrays ---

    def _split_latent(self, z):
        pieces, start = [], 0
        for shape in self.latent_shapes():
            size = int(np.prod(shape))
            pieces.append(z[:, start:start + size].reshape((z.shape[0],) + shape))
            start += size
        return pieces

    def _encode(self, x, trace=None):
        h = x
        logdet = np.zeros(x.shape[0])
        pieces = []
        for block in self.blocks:
            h = squeeze2(h)
            for layer in block.layers:
                if trace is not None:
                    trace.append(h)
                h, ld = layer.forward(h)
                logdet = logdet + ld
            if block.split:
                half = h.shape[1] // 2
                pieces.append(h[:, half:])
                h = h[:, :half]
        pieces.append(h)
        z = np.concatenate([p.reshape(x.shape[0], -1) for p in pieces], axis=1)
        return z, logdet

    def _decode(self, z, trace=None):
        pieces = self._split_latent(z)
        h = pieces.pop()
        for block in reversed(self.blocks):
            if block.split:
                h = np.concatenate([h, pieces.pop()], axis=1)
            for layer in reversed(block.layers):
                if trace is not None:
                    trace.append(h)
                h = layer.inverse(h)
            h = unsqueeze2(h)
        return h

    def _encode_vjp(self, x, gz, glogdet):
        trace = []
        self._encode(x, trace)
        return self._encode_backward(trace, gz, glogdet)

    def _encode_backward(self, trace, gz, glogdet, params=True):
        gpieces = self._split_latent(gz)
        g = gpieces.pop()
        layer_grads = []
        idx = len(trace)
        for block in reversed(self.blocks):
            if block.split:
                g = np.concatenate([g, gpieces.pop()], axis=1)
            for layer in reversed(block.layers):
                idx -= 1
                g, pg = layer.forward_vjp(trace[idx], g, glogdet, params)
                layer_grads.append(pg)
            g = unsqueeze2(g)
        layer_grads.reverse()
        return g, [p for pg in layer_grads for p in pg]

    def _decode_vjp(self, z, gx):
        trace = []
        self._decode(z, trace)
        return self._decode_backward(trace, gx)

    def _decode_backward(self, trace, gx, params=True):
        trace = trace[::-1]  # aligned with forward layer order
        g = gx
        gpieces = []
        pgrads = []
        idx = 0
        for block in self.blocks:
            g = squeeze2(g)
            for layer in block.layers:
                g, pg = layer.inverse_vjp(trace[idx], g, params)
                pgrads.extend(pg)
                idx += 1
            if block.split:
                half = g.shape[1] // 2
                gpieces.append(g[:, half:])
                g = g[:, :half]
        gpieces.append(g)
        gz = np.concatenate([p.reshape(gx.shape[0], -1) for p in gpieces], axis=1)
        return gz, pgrads

    # --- input normalisation ---

    def _as_images(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape == tuple(self.input_shape):
            return x[None], True
        if x.ndim == 4 and x.shape[1:] == tuple(self.input_shape):
            return x, False
        raise ShapeMismatchError(f"expected image shape {self.input_shape}, got {x.shape}")

    def _as_latents(self, z):
        z = np.asarray(z, dtype=DTYPE)
        if z.shape == (self.dim,):
            return z[None], True
        if z.ndim == 2 and z.shape[1] == self.dim:
            return z, False
        raise ShapeMismatchError(f"expected latent dimension {self.dim}, got shape {z.shape}")


def encode(model: FlowModel, x):
    """``x -> (z, logdet)``. Accepts one ``(C, H, W)`` image or a batch."""
    xb, single = model._as_images(x)
    z, logdet = model._encode(xb)
    return (z[0], float(logdet[0])) if single else (z, logdet)


def decode(model: FlowModel, z):
    zb, single = model._as_latents(z)
    x = model._decode(zb)
    return x[0] if single else x


def encode_vjp(model: FlowModel, x, cotangent_z, cotangent_logdet=0.0):
    """Pull ``(cotangent_z, cotangent_logdet)`` back through :func:`encode`.

    Returns ``(grad_x, grad_params)``; ``grad_params`` follows
    ``model.parameters()`` and is summed over the batch.
    """
    xb, single = model._as_images(x)
    gz, _ = model._as_latents(cotangent_z)
    if gz.shape[0] != xb.shape[0]:
        raise ShapeMismatchError("batch sizes of x and cotangent_z differ")
    gld = np.broadcast_to(np.asarray(cotangent_logdet, dtype=DTYPE), (xb.shape[0],))
    gx, gp = model._encode_vjp(xb, gz, gld)
    return (gx[0] if single else gx), gp


def decode_vjp(model: FlowModel, z, cotangent_x):
    zb, single = model._as_latents(z)
    gx, _ = model._as_images(cotangent_x)
    if gx.shape[0] != zb.shape[0]:
        raise ShapeMismatchError("batch sizes of z and cotangent_x differ")
    gz, gp = model._decode_vjp(zb, gx)
    return (gz[0] if single else gz), gp


def actnorm_data_init(model: FlowModel, batch) -> FlowModel:
    """Set every actnorm so its output on ``batch`` is per-channel zero-mean, unit-variance.

    Layers are initialised in order, each seeing the batch as transformed by
    the already-initialised layers before it. Mutates and returns ``model``.
    """
    xb = np.stack([np.asarray(b, dtype=DTYPE) for b in batch]) if isinstance(batch, (list, tuple)) else batch
    xb, _ = model._as_images(xb)
    if len(xb) == 0:
        raise ValueError("empty batch")
    if model.initialized:
        raise ValueError("model is already initialised")
    h = xb
    for block in model.blocks:
        h = squeeze2(h)
        for layer in block.layers:
            if isinstance(layer, ActNorm):
                layer.data_init(h)
            h, _ = layer.forward(h)
        if block.split:
            h = h[:, : h.shape[1] // 2]
    return model


def randomize(model: FlowModel, rng, scale=0.1) -> FlowModel:
    """Perturb every parameter with Gaussian noise of std ``scale`` (test helper)."""
    params = [p + scale * gaussian(rng, p.shape) for p in model.parameters()]
    model.set_parameters(params)
    return model


def save_checkpoint(path, model: FlowModel) -> None:
    text = json.dumps(model.descriptor(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
        f.write(text)
        for p in model.parameters():
            write_tensor(f, p)


def load_checkpoint(path) -> FlowModel:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: not a flow checkpoint")
        version, length = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        desc = json.loads(f.read(length).decode("utf-8"))
        model = FlowModel.create(desc["input_shape"], desc["blocks"], desc["steps"], desc["hidden"], orthogonal=False)
        model.set_parameters([read_tensor(f) for _ in model.parameters()])
    for layer in model.layers:
        if isinstance(layer, ActNorm):
            layer.initialized = bool(desc.get("initialized", False))
    return model
