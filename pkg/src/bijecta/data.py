"""Synthetic datasets, image file formats and dataset loading."""
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .io import decode_bjt, encode_bjt

IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


# -- generators ---------------------------------------------------------------
def demo_sources(size=16):
    """Two fixed, visually distinct grayscale images in [0, 1]: a ring and a cross."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - c, xx - c)
    ring = np.clip(1.0 - np.abs(r - size * 0.3) / 1.5, 0.0, 1.0)
    cross = ((np.abs(yy - xx) <= 1) | (np.abs(yy + xx - 2 * c) <= 1)).astype(np.float64)
    return ring, cross


def gen_linear_mixture(src_a, src_b, n=512, seed=0, weights=None):
    """``n`` flattened mixtures w1 * a + w2 * b with weights drawn from U(0, 1).

    Returns ``(mixtures, weights)`` with shapes ``(n, pixels)`` and ``(n, 2)``.
    """
    a = np.asarray(src_a, dtype=np.float64)
    b = np.asarray(src_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"source images differ in shape: {a.shape} vs {b.shape}")
    if weights is None:
        weights = np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 2))
    weights = np.asarray(weights, dtype=np.float64).reshape(-1, 2)
    basis = np.stack([a.reshape(-1), b.reshape(-1)])
    return weights @ basis, weights


def heart_mask(size=9):
    """Binary heart rasterised from the implicit curve (x^2 + y^2 - 1)^3 <= x^2 y^3."""
    # sample each pixel on a 4x4 subgrid and keep pixels that are mostly inside
    sub = 4
    t = (np.arange(size * sub) + 0.5) / (size * sub)
    x = (t - 0.5) * 2.6
    y = (0.5 - t) * 2.6 + 0.2
    yy, xx = np.meshgrid(y, x, indexing="ij")
    inside = (xx ** 2 + yy ** 2 - 1.0) ** 3 - xx ** 2 * yy ** 3 <= 0
    frac = inside.reshape(size, sub, size, sub).mean(axis=(1, 3))
    return (frac >= 0.5).astype(np.float64)


def gen_affine_sprite(n=10000, canvas=32, seed=0, sprite=None, intensity=0.8, channels=1):
    """Images of one sprite at uniformly random integer positions on a black canvas.

    Returns ``(images, xy)``: images of shape ``(n, canvas, canvas)`` (or
    ``(n, canvas, canvas, 3)`` with ``channels=3``), and the top-left
    column/row of each placement.
    """
    sprite = heart_mask() if sprite is None else np.asarray(sprite, dtype=np.float64)
    h, w = sprite.shape
    if h > canvas or w > canvas:
        raise ConfigError(f"sprite {sprite.shape} does not fit a {canvas}x{canvas} canvas",
                          key="canvas")
    if channels not in (1, 3):
        raise ConfigError("channels must be 1 or 3", key="channels")
    rng = np.random.default_rng(seed)
    xy = np.column_stack([rng.integers(0, canvas - w + 1, size=n),
                          rng.integers(0, canvas - h + 1, size=n)])
    images = np.zeros((n, canvas, canvas))
    patch = sprite * intensity
    for i, (x, y) in enumerate(xy):
        images[i, y:y + h, x:x + w] = patch
    if channels == 3:
        # light blue on black
        images = images[..., None] * np.array([0.6, 0.8, 1.0])
    return images, xy.astype(np.float64)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "affine_sprite"
    n: int = 10000
    canvas: int = 32
    seed: int = 0
    path: str = ""

    def build(self):
        """Returns ``(images, sources)``; ``sources`` is None for files."""
        if self.kind == "affine_sprite":
            return gen_affine_sprite(self.n, self.canvas, self.seed)
        if self.kind == "linear_mixture":
            a, b = demo_sources(self.canvas)
            mix, w = gen_linear_mixture(a, b, self.n, self.seed)
            return mix.reshape(-1, self.canvas, self.canvas), w
        if self.kind == "file":
            arr, _ = load_dataset(self.path)
            return arr, None
        raise ConfigError(f"unknown dataset kind {self.kind!r}", key="dataset")


# -- file formats -------------------------------------------------------------
def read_idx(buf):
    """Parse an IDX byte string (big-endian header: 0, 0, type, rank, extents)."""
    if len(buf) < 4:
        raise FormatError("IDX header truncated", offset=len(buf))
    zero, dtype_code, rank = struct.unpack(">HBB", buf[:4])
    if zero != 0 or dtype_code not in IDX_TYPES:
        raise FormatError("bad IDX magic", offset=0)
    head = 4 + 4 * rank
    if len(buf) < head:
        raise FormatError("IDX dimensions truncated", offset=len(buf))
    shape = struct.unpack(f">{rank}I", buf[4:head])
    dtype = np.dtype(IDX_TYPES[dtype_code])
    need = int(np.prod(shape)) * dtype.itemsize
    if len(buf) - head != need:
        raise FormatError(f"IDX payload has {len(buf) - head} bytes, expected {need}",
                          offset=head)
    return np.frombuffer(buf, dtype=dtype, offset=head).reshape(shape)


def write_idx(arr):
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    return struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape) \
        + arr.tobytes()


def load_dataset(path):
    """Load a BJT1 or IDX file as f64 values in [0, 1] plus metadata."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf:
        raise FormatError(f"{path} is empty", offset=0)
    if buf[:4] == b"BJT1":
        arr = decode_bjt(buf)
        fmt = "bjt"
    else:
        arr = read_idx(buf)
        fmt = "idx"
    raw_dtype = str(arr.dtype)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    return arr, {"format": fmt, "shape": arr.shape, "dtype": raw_dtype}


def save_dataset(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_bjt(np.asarray(arr)))


def image_grid(images, ncols=None, pad=1):
    """Tile ``(n, h, w)`` or ``(n, h, w, 3)`` images into one array."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    n, h, w = imgs.shape[:3]
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = int(np.ceil(n / ncols))
    shape = (nrows * (h + pad) - pad, ncols * (w + pad) - pad) + imgs.shape[3:]
    grid = np.zeros(shape)
    for i in range(n):
        r, c = divmod(i, ncols)
        grid[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = imgs[i]
    return grid


def save_images(images, path, ncols=None):
    """Write images as one binary PGM (grayscale) or PPM (RGB) grid.

    Values are clipped to [0, 1] and scaled to 0..255.
    """
    grid = image_grid(images, ncols)
    pixels = np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P6" if pixels.ndim == 3 else b"P5"
    h, w = pixels.shape[:2]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pnm(path):
    """Read a binary PGM/PPM written by :func:`save_images`, as u8."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file", offset=0)
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PNM header truncated", offset=pos)
        fields.append(int(buf[start:pos]))
    pos += 1
    w, h, _ = fields
    shape = (h, w, 3) if buf[:2] == b"P6" else (h, w)
    need = int(np.prod(shape))
    if len(buf) - pos != need:
        raise FormatError(f"PNM payload has {len(buf) - pos} bytes, expected {need}", offset=pos)
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(shape)
