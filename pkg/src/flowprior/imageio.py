"""Binary PGM (P5) / PPM (P6) and native ``.frt`` tensor files, plus image grids."""

from __future__ import annotations

import os

import numpy as np

from .tensor import DTYPE, ShapeMismatchError, load_tensor, save_tensor

SEPARATOR = 2


class ImageFormatError(ValueError):
    pass


def _header_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("truncated header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("unterminated comment in header")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as err:
        raise ImageFormatError(f"malformed header: {err}") from None
    if width < 1 or height < 1:
        raise ImageFormatError("image dimensions must be positive")
    if not 1 <= maxval <= 255:
        raise ImageFormatError(f"unsupported maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    raster = data[offset:offset + size]
    if len(raster) != size:
        raise ImageFormatError(f"expected {size} raster bytes, got {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1).astype(DTYPE) / maxval


def encode_pnm(img, comments=()) -> bytes:
    """Clamp to [0, 1], quantise to 8 bits and serialise as P5 (C=1) or P6 (C=3)."""
    img = np.asarray(img, dtype=DTYPE)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ShapeMismatchError(f"PGM/PPM need 1 or 3 channels, got {c}")
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    head = b"P5" if c == 1 else b"P6"
    lines = [head] + [b"# " + str(t).encode("utf-8") for t in comments]
    lines.append(f"{w} {h}\n255".encode("ascii"))
    return b"\n".join(lines) + b"\n" + pixels.transpose(1, 2, 0).tobytes()


def read_image(path) -> np.ndarray:
    """Read ``.pgm`` / ``.ppm`` into a ``(C, H, W)`` array in [0, 1], or a ``.frt`` tensor as-is."""
    if str(path).lower().endswith(".frt"):
        return load_tensor(path)
    with open(path, "rb") as f:
        return decode_pnm(f.read())


def write_image(path, img, comments=()) -> None:
    if str(path).lower().endswith(".frt"):
        save_tensor(path, img)
        return
    with open(path, "wb") as f:
        f.write(encode_pnm(img, comments))


def grid_shape(rows, cols, h, w):
    """Height and width of a grid: tiles separated and framed by SEPARATOR-pixel white lines."""
    return rows * h + SEPARATOR * (rows + 1), cols * w + SEPARATOR * (cols + 1)


def image_grid(images, rows, labels=(), path=None) -> np.ndarray:
    """Tile ``images`` (row-major, ``rows`` rows) into one 3-channel montage.

    Grayscale tiles are replicated to RGB. If ``path`` is given the grid is
    written as PPM with ``labels`` stored as header comments.
    """
    images = [np.asarray(im, dtype=DTYPE) for im in images]
    if not images:
        raise ValueError("no images")
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise ShapeMismatchError("all grid images must share one shape")
    _, h, w = shape
    cols = -(-len(images) // rows)
    gh, gw = grid_shape(rows, cols, h, w)
    grid = np.ones((3, gh, gw))
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        top = SEPARATOR + r * (h + SEPARATOR)
        left = SEPARATOR + c * (w + SEPARATOR)
        grid[:, top:top + h, left:left + w] = np.clip(im, 0.0, 1.0) if im.shape[0] == 3 else np.clip(im[:1], 0.0, 1.0)
    if path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        write_image(path, grid, comments=[f"row {i}: {label}" for i, label in enumerate(labels)])
    return grid
