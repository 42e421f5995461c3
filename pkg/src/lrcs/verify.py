"""Finite-difference gradient suite behind ``lrcs gradcheck``.

Every differentiable primitive is checked in float64 against central
differences, followed by the full two-stage network loss with a few sampled
coordinates from every parameter tensor.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .network import ModelConfig, init_params, model_forward, named_parameters, replace_parameters
from .sensing import MeasurementOperator, Measurements, init_reconstruction, orth_loss, sample
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


def primitive_cases(seed=0):
    """``(name, closure, inputs)`` triples covering every primitive."""
    rng = np.random.default_rng(seed)

    def fixed(fn, w_seed):
        # a fixed random linear functional makes every output coordinate matter
        def closure(*ts):
            out = fn(*ts)
            w = np.random.default_rng(w_seed).standard_normal(out.shape)
            return T.tsum(T.mul(out, Tensor(w, dtype=out.dtype)))
        return closure

    r = rng.standard_normal
    s = lambda: int(rng.integers(1 << 31))  # noqa: E731
    cases = [
        ("add", fixed(T.add, s()), [r((3, 4)), r((3, 4))]),
        ("sub", fixed(T.sub, s()), [r((3, 4)), r((3, 4))]),
        ("mul", fixed(T.mul, s()), [r((3, 4)), r((3, 4))]),
        ("mul_scalar", fixed(T.mul, s()), [r(()), r((3, 4))]),
        ("sum", lambda x: T.mul(T.tsum(x), T.tsum(x)), [r((2, 3))]),
        ("mean", lambda x: T.mul(T.mean(x), T.mean(x)), [r((2, 3))]),
        ("relu", fixed(T.relu, s()), [_away_from_zero(rng, (4, 5))]),
        ("reshape", fixed(lambda x: T.reshape(x, (6, 2)), s()), [r((3, 4))]),
        ("permute", fixed(lambda x: T.permute(x, (2, 0, 1)), s()), [r((2, 3, 4))]),
        ("transpose", fixed(T.transpose, s()), [r((3, 5))]),
        ("matmul", fixed(T.matmul, s()), [r((4, 5)), r((5, 3))]),
        ("matmul_batched", fixed(T.matmul, s()), [r((2, 4, 5)), r((2, 5, 3))]),
        ("concat", fixed(lambda a, b: T.concat([a, b], axis=1), s()), [r((2, 3)), r((2, 5))]),
        ("conv2d", fixed(lambda x, k, b: T.conv2d(x, k, b, padding=1), s()),
         [r((2, 8, 8)), r((4, 2, 3, 3)), r((4,))]),
        ("conv2d_batched", fixed(lambda x, k: T.conv2d(x, k, padding=0), s()),
         [r((2, 3, 6, 7)), r((2, 3, 3, 3))]),
        ("conv2d_stride2", fixed(lambda x, k: T.conv2d(x, k, stride=2, padding=1), s()),
         [r((2, 7, 7)), r((3, 2, 3, 3))]),
        ("conv2d_1x1", fixed(lambda x, k, b: T.conv2d(x, k, b), s()),
         [r((3, 5, 5)), r((2, 3, 1, 1)), r((2,))]),
        ("adaptive_avg_pool", fixed(lambda x: T.adaptive_avg_pool(x, 3, 2), s()),
         [r((2, 7, 5))]),
        ("pixel_shuffle", fixed(lambda x: T.pixel_shuffle(x, 2), s()), [r((8, 3, 2))]),
        ("pixel_unshuffle", fixed(lambda x: T.pixel_unshuffle(x, 2), s()), [r((2, 4, 6))]),
    ]
    return cases


def sensing_cases(seed=0):
    rng = np.random.default_rng([seed, 3])
    img = rng.random((1, 33, 66))
    y = rng.standard_normal((8, 2))
    w_y = rng.standard_normal((8, 2))
    w_x = rng.standard_normal((1, 33, 66))

    def op_of(phi):
        return MeasurementOperator(phi, 8 / 1089)

    def sampled(phi, x):
        return T.tsum(T.mul(sample(op_of(phi), x).y, Tensor(w_y)))

    def back(phi, yy):
        x0 = init_reconstruction(op_of(phi), Measurements(yy, (1, 1, 2)))
        return T.tsum(T.mul(x0, Tensor(w_x)))

    return [
        ("sample", sampled, [rng.standard_normal((8, 1089)), img]),
        ("init_reconstruction", back, [rng.standard_normal((8, 1089)), y]),
        ("orth_loss", lambda phi: orth_loss(op_of(phi)), [rng.standard_normal((8, 32))]),
    ]


def network_case(seed=0, stages=2, size=33, channels=4, rank=2, tau=0.01):
    """Closure over every named parameter of a small float64 network."""
    from .train import total_loss

    cfg = ModelConfig(stages=stages, rank=rank, channels=channels, ratio=0.25)
    params = init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 5])
    # move the scalars off their symmetric start so every term matters
    for st in params.stages:
        for name in ("rho1", "rho2", "eta", "alpha", "gamma"):
            t = getattr(st.scalars, name)
            t.data = t.data + 0.05 * rng.standard_normal()
        for conv in (st.lrgm.entry, st.lrgm.fuse, st.lrgm.p_head, st.lrgm.q_head,
                     st.gdpm.fuse, st.gdpm.head, st.gdpm.transmit,
                     *[c for blk in st.gdpm.blocks for c in blk]):
            conv.bias.data = 0.1 * rng.standard_normal(conv.bias.shape)
    gt = Tensor(rng.random((1, 1, size, size)))
    names = list(named_parameters(params))

    def loss(*tensors):
        replace_parameters(params, dict(zip(names, tensors)))
        x_k, _ = model_forward(sample(params.op, gt), params)
        return total_loss(x_k, gt, params.op, tau)

    inputs = [t.data.copy() for t in named_parameters(params).values()]
    return names, loss, inputs


def gradient_suite(seed=0, samples_per_tensor=3, eps=1e-6):
    """Run every check; returns a list of ``(name, max relative error)``."""
    results = []
    for name, fn, inputs in primitive_cases(seed) + sensing_cases(seed):
        samples = None if sum(np.size(a) for a in inputs) <= 400 else 40
        results.append((name, grad_check(fn, inputs, eps=eps, samples=samples, seed=seed)))
    names, loss, inputs = network_case(seed)
    # one check per parameter class, each over a few sampled coordinates
    classes = {"phi": [], "scalars": [], "lrgm": [], "gdpm": []}
    for i, n in enumerate(names):
        key = "phi" if n == "phi" else ("lrgm" if ".lrgm." in n else
                                        "gdpm" if ".gdpm." in n else "scalars")
        classes[key].append(i)
    for key, idx in classes.items():
        def fn(*sub, idx=idx):
            full = [Tensor(a) for a in inputs]
            for i, t in zip(idx, sub):
                full[i] = t
            return loss(*full)
        err = grad_check(fn, [inputs[i] for i in idx], eps=eps,
                         samples=samples_per_tensor, seed=seed)
        results.append((f"network_k2.{key}", err))
    return results
