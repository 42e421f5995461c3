"""The unfolded K-stage low-rank reconstruction network.

Every stage runs three steps on the carried state ``(x, z, F)``:

1. the low-rank generator builds ``l = p @ q`` from pooled deep features,
   so ``rank(l) <= r`` holds by construction;
2. the analytic z-step mixes ``x``, ``z`` and ``l`` and applies a gradient
   step on the data term ``||phi z - y||^2``;
3. the x-step mixes ``x`` and ``z`` and subtracts a learned prior gradient
   produced by two dense blocks, which also emit the features ``F`` handed
   to the next stage.

All feature tensors are batched, ``n x C x H x W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .sensing import (MeasurementOperator, Measurements, gram_apply,
                      init_measurement, init_reconstruction)
from .tensor import ShapeError, Tensor

SCALAR_NAMES = ("rho1", "rho2", "eta", "alpha", "gamma")
INIT_SCALARS = {"rho1": 1 / 3, "rho2": 1 / 3, "eta": 1 / 3, "alpha": 0.5, "gamma": 0.01}
IDENTITY_SCALARS = {"rho1": 1.0, "rho2": 0.0, "eta": 0.0, "alpha": 1.0, "gamma": 0.0}
DENSE_LAYERS = 3


@dataclass
class ModelConfig:
    stages: int = 3
    rank: int = 4
    channels: int = 16
    ratio: float = 0.25

    def __post_init__(self):
        # zero stages is tolerated so tests can inspect the bare x0 path
        if self.stages < 0 or self.rank < 1 or self.channels < 1:
            raise ValueError(f"invalid model config {self}")


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor

    def __call__(self, x):
        k = self.weight.shape[-1]
        return T.conv2d(x, self.weight, self.bias, padding=k // 2)


@dataclass
class StageParams:
    rho1: Tensor
    rho2: Tensor
    eta: Tensor
    alpha: Tensor
    gamma: Tensor

    @classmethod
    def from_values(cls, dtype=np.float32, **values):
        return cls(**{k: Tensor(np.asarray(values[k], dtype=dtype), requires_grad=True)
                      for k in SCALAR_NAMES})

    def set(self, **values):
        for k, v in values.items():
            getattr(self, k).data = np.asarray(v, dtype=getattr(self, k).dtype)


@dataclass
class LrgmParams:
    entry: Conv
    fuse: Conv
    p_head: Conv
    q_head: Conv
    rank: int


@dataclass
class GdpmParams:
    fuse: Conv
    blocks: list
    head: Conv
    transmit: Conv


@dataclass
class Stage:
    scalars: StageParams
    lrgm: LrgmParams
    gdpm: GdpmParams


@dataclass
class NetParams:
    config: ModelConfig
    op: MeasurementOperator
    stages: list = field(default_factory=list)


@dataclass
class ReconstructionState:
    x: Tensor
    z: Tensor
    l: Tensor
    F: Tensor
    prior_grad: Tensor = None


def _conv(rng, c_in, c_out, k, dtype):
    std = np.sqrt(2.0 / (c_in * k * k))
    w = rng.standard_normal((c_out, c_in, k, k)) * std
    return Conv(Tensor(w.astype(dtype), requires_grad=True),
                Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))


def init_params(config, seed=0, dtype=np.float32):
    """Fresh parameters: fan-in scaled Gaussian kernels, zero biases and the
    default stage scalars.  Deterministic in ``seed``."""
    op = init_measurement(config.ratio, seed, dtype=dtype)
    rng = np.random.default_rng([seed, 1])
    c = config.channels
    stages = []
    for _ in range(config.stages):
        lrgm = LrgmParams(entry=_conv(rng, 2, c, 3, dtype),
                          fuse=_conv(rng, 2 * c, c, 3, dtype),
                          p_head=_conv(rng, c, 1, 1, dtype),
                          q_head=_conv(rng, c, 1, 1, dtype),
                          rank=config.rank)
        blocks = [[_conv(rng, c * (j + 1), c, 3, dtype) for j in range(DENSE_LAYERS)]
                  for _ in range(2)]
        gdpm = GdpmParams(fuse=_conv(rng, 2, c, 3, dtype), blocks=blocks,
                          head=_conv(rng, c, 1, 3, dtype),
                          transmit=_conv(rng, 2 * c, c, 1, dtype))
        stages.append(Stage(StageParams.from_values(dtype=dtype, **INIT_SCALARS),
                            lrgm, gdpm))
    return NetParams(config, op, stages)


def _slots(params):
    """``(name, owner, attribute)`` for every trainable tensor, in order."""
    out = [("phi", params.op, "phi")]
    for k, st in enumerate(params.stages):
        pre = f"stage{k}"
        out += [(f"{pre}.{name}", st.scalars, name) for name in SCALAR_NAMES]
        for part in ("entry", "fuse", "p_head", "q_head"):
            conv = getattr(st.lrgm, part)
            out += [(f"{pre}.lrgm.{part}.{key}", conv, key) for key in ("weight", "bias")]
        g = st.gdpm
        convs = [("fuse", g.fuse)]
        convs += [(f"block{b}.conv{j}", cv) for b, blk in enumerate(g.blocks)
                  for j, cv in enumerate(blk)]
        convs += [("head", g.head), ("transmit", g.transmit)]
        for part, conv in convs:
            out += [(f"{pre}.gdpm.{part}.{key}", conv, key) for key in ("weight", "bias")]
    return out


def named_parameters(params):
    """Every trainable tensor keyed by a dotted name.

    The order is fixed: ``phi`` first, then stage by stage the five scalars,
    the low-rank generator convs and the prior-gradient convs.  Optimizer
    updates and checkpoints both follow it.
    """
    return {name: getattr(owner, attr) for name, owner, attr in _slots(params)}


def replace_parameters(params, tensors):
    """Swap in new tensor objects by name (used to differentiate w.r.t. fresh leaves)."""
    slots = {name: (owner, attr) for name, owner, attr in _slots(params)}
    for name, t in tensors.items():
        if name not in slots:
            raise KeyError(f"no parameter named {name!r}")
        owner, attr = slots[name]
        if t.shape != getattr(owner, attr).shape:
            raise ShapeError(f"{name}: shape {t.shape} does not match "
                             f"{getattr(owner, attr).shape}")
        setattr(owner, attr, t)


def _need4(*tensors):
    for t in tensors:
        if t.ndim != 4:
            raise ShapeError(f"expected an n x C x H x W tensor, got shape {t.shape}")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"state shapes {ref} and {t.shape} disagree")


def lrgm_forward(x_prev, z_prev, F_prev, params, return_factors=False):
    """Low-rank component ``l = p q`` with ``p: H x r`` and ``q: r x W``."""
    _need4(x_prev, z_prev, F_prev)
    n, _, h, w = x_prev.shape
    r = params.rank
    if r > min(h, w):
        raise ShapeError(f"rank {r} exceeds min(H, W) = {min(h, w)}")
    feat = params.entry(T.concat([x_prev, z_prev], axis=1))
    feat = params.fuse(T.concat([feat, F_prev], axis=1))
    p = params.p_head(T.adaptive_avg_pool(feat, h, r))      # n x 1 x H x r
    q = params.q_head(T.adaptive_avg_pool(feat, r, w))      # n x 1 x r x W
    p = T.reshape(p, (n, h, r))
    q = T.reshape(q, (n, r, w))
    low = T.reshape(T.matmul(p, q), (n, 1, h, w))
    if return_factors:
        return low, p, q
    return low


def z_update(x_prev, z_prev, low, y, op, sp, aty=None):
    """``rho1 x + rho2 z + (1 - rho1 - rho2) l - eta phi^T phi z + eta phi^T y``.

    ``aty`` may carry a precomputed ``phi^T y`` (it equals ``x0``).
    """
    _need4(x_prev, z_prev, low)
    if aty is None:
        aty = init_reconstruction(op, y)
        if aty.ndim == 3:
            aty = T.reshape(aty, (1,) + aty.shape)
    _need4(x_prev, aty)
    mix = T.sub(T.sub(1.0, sp.rho1), sp.rho2)
    z = sp.rho1 * x_prev + sp.rho2 * z_prev + mix * low
    return z - sp.eta * gram_apply(op, z_prev) + sp.eta * aty


def gdpm_forward(z, low, x_prev, F_prev, params, sp):
    """x-step with the learned prior gradient; returns ``(x, F, prior_grad)``."""
    _need4(z, low, x_prev, F_prev)
    feat = params.fuse(T.concat([z, low], axis=1))
    for block in params.blocks:
        outs = [feat]
        for conv in block:
            outs.append(T.relu(conv(T.concat(outs, axis=1) if len(outs) > 1 else outs[0])))
        feat = outs[-1]
    prior_grad = params.head(feat)
    x = sp.alpha * x_prev + T.sub(1.0, sp.alpha) * z - sp.gamma * prior_grad
    F = params.transmit(T.concat([feat, F_prev], axis=1))
    return x, F, prior_grad


def model_forward(y, params, config=None):
    """Run all stages from ``x0 = phi^T y``.

    Returns the final estimate and the per-stage states.  Unbatched
    measurements give a ``1 x H x W`` result, batched ones ``n x 1 x H x W``.
    """
    config = config or params.config
    if len(params.stages) != config.stages:
        raise ValueError(f"config has {config.stages} stages but parameters "
                         f"hold {len(params.stages)}")
    op = params.op
    x0 = init_reconstruction(op, y)
    if not y.batched:
        x0 = T.reshape(x0, (1,) + x0.shape)
    n, _, h, w = x0.shape
    x, z = x0, x0
    F = Tensor(np.zeros((n, config.channels, h, w), dtype=x0.dtype))
    states = []
    for st in params.stages:
        low = lrgm_forward(x, z, F, st.lrgm)
        z = z_update(x, z, low, y, op, st.scalars, aty=x0)
        x, F, g = gdpm_forward(z, low, x, F, st.gdpm, st.scalars)
        states.append(ReconstructionState(x, z, low, F, g))
    if not y.batched:
        x = T.reshape(x, x.shape[1:])
    return x, states
