"""Gray-image I/O, block padding, patch extraction and quality metrics.

Images are plain 2-D float64 arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .classic import svd_topk
from .sensing import BLOCK

BT601 = (0.299, 0.587, 0.114)
IMAGE_SUFFIXES = (".pgm", ".png")


@dataclass
class PatchSet:
    size: int
    stride: int
    patches: np.ndarray                      # count x size x size
    coords: list = field(default_factory=list)  # top-left (row, col) per patch

    def __len__(self):
        return len(self.patches)


def _read_pgm(path, raw):
    # header: magic, width, height, maxval separated by whitespace; '#' comments
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise OSError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    magic, width, height, maxval = tokens[0], *map(int, tokens[1:])
    pos += 1
    if magic == b"P5":
        dtype = ">u2" if maxval > 255 else "u1"
        count = width * height
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    elif magic == b"P2":
        data = np.array(raw[pos:].split()[:width * height], dtype=np.int64)
    else:
        raise OSError(f"{path}: unsupported PGM variant {magic!r}")
    if data.size != width * height:
        raise OSError(f"{path}: expected {width * height} pixels, found {data.size}")
    return data.reshape(height, width).astype(np.float64) / maxval


def _read_png(path):
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise OSError(f"{path}: PNG support needs Pillow") from exc
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint16:
        arr = arr / 65535.0
    elif arr.dtype == bool:
        arr = arr.astype(np.float64)
    else:
        arr = arr / 255.0
    if arr.ndim == 3:
        arr = to_gray(arr[..., :3])
    return arr.astype(np.float64)


def to_gray(rgb):
    """Luminance with ITU-R BT.601 weights."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ np.array(BT601)


def load_gray(path):
    """Read a PGM (P5/P2) or PNG file as a gray image in ``[0, 1]``."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc.strerror}") from exc
    if raw[:2] in (b"P5", b"P2"):
        return _read_pgm(path, raw)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    raise OSError(f"{path}: unsupported image format")


def to_uint8(image):
    """Scale by 255, round half up and clamp to ``[0, 255]``."""
    return np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_pgm(path, image):
    """Write an 8-bit binary PGM."""
    pix = to_uint8(image)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def list_images(directory):
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith(IMAGE_SUFFIXES))
    return [os.path.join(directory, n) for n in names]


def pad_to_block(image, block=BLOCK):
    """Replicate the bottom rows and right columns up to the next multiple of
    ``block``; returns the padded image and the original ``(H, W)``."""
    image = np.asarray(image)
    h, w = image.shape
    ph = -h % block
    pw = -w % block
    return np.pad(image, ((0, ph), (0, pw)), mode="edge"), (h, w)


def crop(image, dims):
    h, w = dims
    return np.asarray(image)[:h, :w]


def extract_patches(image, size, stride):
    """Row-major sliding grid of ``size x size`` patches."""
    image = np.asarray(image)
    h, w = image.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be positive")
    rows = range(0, h - size + 1, stride)
    cols = range(0, w - size + 1, stride)
    coords = [(r, c) for r in rows for c in cols]
    patches = np.stack([image[r:r + size, c:c + size] for r, c in coords])
    return PatchSet(size, stride, patches, coords)


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, win):
    k = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", view, win)


def ssim(a, b, peak=1.0, size=11, sigma=1.5):
    """Mean structural similarity over all fully-contained Gaussian windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(a.shape) < size:
        raise ValueError(f"ssim: image {a.shape} smaller than the {size}x{size} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    win = gaussian_window(size, sigma)
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def singular_spectrum(patch):
    """All singular values of a patch, descending."""
    patch = np.asarray(patch, dtype=np.float64)
    return svd_topk(patch, min(patch.shape)).s


def energy_ratio(svals, r):
    """Share of squared singular-value energy in the leading ``r`` values."""
    svals = np.asarray(svals, dtype=np.float64)
    if r < 0 or r > len(svals):
        raise ValueError(f"r={r} outside [0, {len(svals)}]")
    total = np.sum(svals ** 2)
    if total == 0:
        return 1.0
    return float(np.sum(svals[:r] ** 2) / total)
