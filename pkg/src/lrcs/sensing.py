"""Block-wise compressive sampling with a learnable measurement matrix.

Images are cut into non-overlapping 33 x 33 blocks.  Each block, flattened
row-major to 1089 values, is measured as ``phi @ block``.  Measurements are
stored column-wise: one column per block, ordered image-major and then
row-major over the block grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BLOCK = 33
BLOCK_SIZE = BLOCK * BLOCK

STANDARD_RATIOS = (0.01, 0.04, 0.10, 0.25, 0.50)


@dataclass
class MeasurementOperator:
    phi: Tensor
    ratio: float

    @property
    def m(self):
        return self.phi.shape[0]

    @property
    def n(self):
        return self.phi.shape[1]


@dataclass
class Measurements:
    y: Tensor
    grid: tuple  # (images, block rows, block cols)
    batched: bool = False

    @property
    def blocks(self):
        n, bh, bw = self.grid
        return n * bh * bw


def ratio_to_m(ratio):
    """Measurement count ``floor(ratio * 1089)``, at least 1."""
    if not 0 < ratio <= 1:
        raise ValueError(f"CS ratio must lie in (0, 1], got {ratio}")
    return max(1, math.floor(ratio * BLOCK_SIZE))


def init_measurement(ratio, seed=0, dtype=np.float32):
    """Gaussian rows orthonormalized by QR; deterministic in ``seed``."""
    m = ratio_to_m(ratio)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((BLOCK_SIZE, m))
    q, r = np.linalg.qr(g)
    q *= np.sign(np.diag(r))
    return MeasurementOperator(Tensor(q.T.astype(dtype), requires_grad=True), ratio)


def _as_batch(image):
    image = T.as_tensor(image)
    if image.ndim == 3:
        return T.reshape(image, (1,) + image.shape), False
    if image.ndim == 4:
        return image, True
    raise ShapeError(f"expected 1 x H x W or n x 1 x H x W image, got {image.shape}")


def _check_blocks(x4):
    n, c, h, w = x4.shape
    if c != 1:
        raise ShapeError(f"expected a single-channel image, got shape {x4.shape}")
    if h % BLOCK or w % BLOCK or h == 0 or w == 0:
        raise ShapeError(f"image extents {h}x{w} are not multiples of {BLOCK}; pad first")
    return n, h // BLOCK, w // BLOCK


def sample(op, image):
    """Measure every 33 x 33 block: ``y[:, b] = phi @ vec(block_b)``."""
    x4, batched = _as_batch(image)
    n, bh, bw = _check_blocks(x4)
    cols = T.pixel_unshuffle(x4, BLOCK)                 # n x 1089 x bh x bw
    cols = T.reshape(T.permute(cols, (1, 0, 2, 3)), (BLOCK_SIZE, n * bh * bw))
    return Measurements(T.matmul(op.phi, cols), (n, bh, bw), batched)


def sample_conv(op, image):
    """Same measurements computed as a stride-33 convolution with phi rows as kernels."""
    x4, batched = _as_batch(image)
    n, bh, bw = _check_blocks(x4)
    kernel = T.reshape(op.phi, (op.m, 1, BLOCK, BLOCK))
    out = T.conv2d(x4, kernel, stride=BLOCK)            # n x M x bh x bw
    y = T.reshape(T.permute(out, (1, 0, 2, 3)), (op.m, n * bh * bw))
    return Measurements(y, (n, bh, bw), batched)


def init_reconstruction(op, meas):
    """``phi^T y`` per block, rearranged to 33 x 33 by pixel shuffle and tiled."""
    n, bh, bw = meas.grid
    if meas.y.shape != (op.m, n * bh * bw):
        raise ShapeError(f"measurements {meas.y.shape} do not match operator with "
                         f"M={op.m} and block grid {meas.grid}")
    cols = T.matmul(T.transpose(op.phi), meas.y)        # 1089 x nB
    cols = T.permute(T.reshape(cols, (BLOCK_SIZE, n, bh, bw)), (1, 0, 2, 3))
    x = T.pixel_shuffle(cols, BLOCK)                    # n x 1 x H x W
    if not meas.batched:
        x = T.reshape(x, x.shape[1:])
    return x


def gram_apply(op, image):
    """``phi^T phi`` applied block-wise to an image."""
    return init_reconstruction(op, sample(op, image))


def orth_loss(op):
    """``||phi phi^T - E||_F^2 / M^2``."""
    gram = T.matmul(op.phi, T.transpose(op.phi))
    diff = T.sub(gram, Tensor(np.eye(op.m, dtype=op.phi.dtype)))
    return T.mul(T.tsum(T.mul(diff, diff)), 1.0 / op.m ** 2)


def to_blocks(image):
    """``H x W`` array to the ``1089 x B`` matrix of row-major flattened blocks."""
    image = np.asarray(image)
    h, w = image.shape
    if h % BLOCK or w % BLOCK:
        raise ShapeError(f"image extents {h}x{w} are not multiples of {BLOCK}")
    return T._unshuffle(image[None], BLOCK).reshape(BLOCK_SIZE, -1)


def from_blocks(cols, shape):
    """Inverse of :func:`to_blocks` for an image of the given ``(H, W)``."""
    h, w = shape
    cols = np.asarray(cols).reshape(BLOCK_SIZE, h // BLOCK, w // BLOCK)
    return T._shuffle(cols, BLOCK)[0]
