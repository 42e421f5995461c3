"""Model-based reference solver for the low-rank regularized CS problem.

The unfolded network learns the stage scalars and the prior gradient.  Here
both are fixed instead: the prior is ``G(x) = 1/2 ||D x||^2`` with ``D`` the
forward-difference operator, and the low-rank component is the truncated
SVD of the current ``z``.  Every step is then an exact majorization update
and can be checked in closed form.

Everything in this module runs in float64 on plain numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sensing import MeasurementOperator, Measurements, from_blocks, to_blocks


class ConvergenceError(RuntimeError):
    pass


class SolverDivergence(RuntimeError):
    """The surrogate cost kept increasing; ``trace`` holds the cost history."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class SvdResult:
    s: np.ndarray
    u: np.ndarray
    v: np.ndarray


def _orthonormal_fill(basis, dim, rng):
    vec = rng.standard_normal(dim)
    for _ in range(2):
        if basis:
            b = np.array(basis).T
            vec -= b @ (b.T @ vec)
    return vec / np.linalg.norm(vec)


def svd_topk(mat, k, tol=1e-10, max_iter=1000, seed=0):
    """Leading ``k`` singular triplets by power iteration with deflation.

    Each right vector is found by iterating on the Gram matrix of the
    deflated input until the eigen-residual ``||G v - (v'Gv) v||`` drops
    below ``tol`` times the current eigenvalue (floored at 1e-10 of the
    leading one, below which float64 noise dominates).  Every 10 iterations without
    convergence the iteration matrix is squared, squaring the eigenvalue
    ratio that limits the rate.
    """
    a = np.asarray(mat, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd_topk expects a matrix, got shape {a.shape}")
    h, w = a.shape
    if not 1 <= k <= min(h, w):
        raise ValueError(f"k={k} must lie in [1, {min(h, w)}]")
    if h < w:
        res = svd_topk(a.T, k, tol, max_iter, seed)
        return SvdResult(res.s, res.v, res.u)

    rng = np.random.default_rng(seed)
    resid = a.copy()
    scale = np.abs(a).max()
    tiny = 1e-13 * scale if scale > 0 else 0.0
    top = 0.0
    svals, us, vs = [], [], []
    for i in range(k):
        gram = resid.T @ resid
        v = _orthonormal_fill(vs, w, rng)
        it_mat = gram
        for it in range(max_iter):
            gv = gram @ v
            lam = float(v @ gv)
            top = max(top, lam)
            if lam <= tiny * tiny or np.linalg.norm(gv - lam * v) <= tol * max(lam, 1e-10 * top):
                break
            nxt = it_mat @ v
            if vs:
                vb = np.array(vs).T
                nxt -= vb @ (vb.T @ nxt)
            norm = np.linalg.norm(nxt)
            if norm == 0.0:
                break
            v = nxt / norm
            if (it + 1) % 10 == 0:
                it_mat = it_mat @ it_mat
                it_mat /= np.abs(it_mat).max()
        else:
            raise ConvergenceError(f"singular vector {i} did not converge in "
                                   f"{max_iter} iterations")
        av = resid @ v
        for _ in range(2):
            if us:
                ub = np.array(us).T
                av -= ub @ (ub.T @ av)
        sigma = float(np.linalg.norm(av))
        if sigma > tiny:
            u = av / sigma
        else:
            u = _orthonormal_fill(us, h, rng)
        svals.append(sigma)
        us.append(u)
        vs.append(v)
        resid -= sigma * np.outer(u, v)

    order = np.argsort(svals)[::-1]
    s = np.array(svals)[order]
    return SvdResult(s, np.array(us).T[:, order], np.array(vs).T[:, order])


def low_rank_project(mat, r):
    """Best rank-``r`` approximation in Frobenius norm (truncated SVD)."""
    res = svd_topk(mat, r)
    return (res.u * res.s) @ res.v.T


def sigma_max(mat, tol=1e-12, max_iter=10000, seed=0):
    """Largest singular value by power iteration on the smaller Gram matrix.

    Only the value is needed, so convergence is judged on its relative
    change; clustered spectra (orthonormal rows) converge at once.
    """
    a = np.asarray(mat, dtype=np.float64)
    gram = a @ a.T if a.shape[0] <= a.shape[1] else a.T @ a
    v = np.random.default_rng(seed).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        gv = gram @ v
        new = float(np.linalg.norm(gv))
        if new == 0.0:
            return 0.0
        v = gv / new
        if abs(new - lam) <= tol * new:
            return math.sqrt(new)
        lam = new
    raise ConvergenceError(f"largest singular value did not converge in {max_iter} iterations")


# ------------------------------------------------------------- prior terms

def diff(x):
    """Horizontal and vertical forward differences with a zero boundary."""
    dh = np.zeros_like(x)
    dv = np.zeros_like(x)
    dh[:, :-1] = x[:, 1:] - x[:, :-1]
    dh[:, -1] = -x[:, -1]
    dv[:-1] = x[1:] - x[:-1]
    dv[-1] = -x[-1]
    return dh, dv


def diff_adjoint(dh, dv):
    out = -dh - dv
    out[:, 1:] += dh[:, :-1]
    out[1:] += dv[:-1]
    return out


def prior(x):
    dh, dv = diff(x)
    return 0.5 * (np.sum(dh * dh) + np.sum(dv * dv))


def prior_grad(x):
    return diff_adjoint(*diff(x))


# ------------------------------------------------------------------ solver

@dataclass
class SolverHyper:
    lam: float = 0.02
    mu: float = 0.05
    beta: float = 0.5
    l1: float | None = None
    l2: float = 8.0
    iterations: int = 200
    rank: int = 8

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0 or self.beta <= 0 or self.l2 <= 0 or (
                self.l1 is not None and self.l1 <= 0):
            raise ValueError(f"invalid solver constants {self}")
        if self.iterations < 0 or self.rank < 1:
            raise ValueError(f"invalid solver settings {self}")

    def s(self, l1=None):
        l1 = self.l1 if l1 is None else l1
        return l1 + 2 * self.mu + 2 * self.beta

    def stage_scalars(self, l1=None):
        """Closed-form step coefficients of the unfolded update."""
        l1 = self.l1 if l1 is None else l1
        s = self.s(l1)
        denom = self.lam * self.l2 + self.beta
        return {"rho1": 2 * self.beta / s, "rho2": l1 / s, "eta": 1 / s,
                "alpha": self.lam * self.l2 / denom, "gamma": self.lam / denom}


def _phi(op):
    return np.asarray(op.phi.data if isinstance(op, MeasurementOperator) else op,
                      dtype=np.float64)


def _y_cols(y):
    return np.asarray(y.y.data if isinstance(y, Measurements) else y, dtype=np.float64)


def measure(op, image):
    return _phi(op) @ to_blocks(image)


def surrogate_cost(x, z, l, y, op, hyper):
    """``1/2||phi z - y||^2 + lam G(x) + mu/2 ||z - l||^2 + beta/2 ||x - z||^2``."""
    x, z, l = (np.asarray(v, dtype=np.float64) for v in (x, z, l))
    if not x.shape == z.shape == l.shape:
        raise ValueError(f"shapes {x.shape}, {z.shape}, {l.shape} disagree")
    y = _y_cols(y)
    resid = measure(op, z) - y
    return (0.5 * np.sum(resid ** 2) + hyper.lam * prior(x)
            + 0.5 * hyper.mu * np.sum((z - l) ** 2)
            + 0.5 * hyper.beta * np.sum((x - z) ** 2))


@dataclass
class SolveResult:
    x: np.ndarray
    z: np.ndarray
    l: np.ndarray
    costs: list = field(default_factory=list)
    psnrs: list = field(default_factory=list)
    l1: float = 0.0


def solve(y, op, hyper, shape, reference=None):
    """Iterate the majorized z- and x-updates from ``x0 = phi^T y``.

    ``shape`` is the (block-aligned) image size.  With ``reference`` given,
    the PSNR of every iterate is recorded as well.
    """
    from .imaging import psnr

    phi = _phi(op)
    y = _y_cols(y)
    l1 = hyper.l1 if hyper.l1 is not None else sigma_max(phi) ** 2
    if hyper.rank > min(shape):
        raise ValueError(f"rank {hyper.rank} exceeds image extents {shape}")
    c = hyper.stage_scalars(l1)

    def gram(img):
        return from_blocks(phi.T @ (phi @ to_blocks(img)), shape)

    aty = from_blocks(phi.T @ y, shape)
    x = z = aty
    low = np.zeros(shape)
    res = SolveResult(x, z, low, l1=l1)
    rises = 0
    prev = None
    for k in range(hyper.iterations):
        low = low_rank_project(z, hyper.rank)
        z_new = (c["rho1"] * x + c["rho2"] * z
                 + (1 - c["rho1"] - c["rho2"]) * low
                 - c["eta"] * gram(z) + c["eta"] * aty)
        x = c["alpha"] * x + (1 - c["alpha"]) * z_new - c["gamma"] * prior_grad(x)
        z = z_new
        cost = surrogate_cost(x, z, low, y, phi, hyper)
        res.costs.append(cost)
        if reference is not None:
            res.psnrs.append(psnr(x, reference))
        if not math.isfinite(cost):
            raise SolverDivergence(f"cost became {cost} at iteration {k + 1}", res.costs)
        if prev is not None and cost > prev + 1e-6:
            rises += 1
            if rises >= 3:
                raise SolverDivergence(f"cost rose for 3 consecutive iterations "
                                       f"(iteration {k + 1})", res.costs)
        else:
            rises = 0
        prev = cost
    res.x, res.z, res.l = x, z, low
    return res


def majorization_check(op, x0, x, l1, y=None):
    """True iff the quadratic upper bound at ``x0`` holds at ``x`` for
    ``f(z) = 1/2 ||phi z - y||^2`` (slack 1e-9)."""
    phi = _phi(op)
    x0 = np.asarray(x0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.zeros((phi.shape[0], to_blocks(x0).shape[1])) if y is None else _y_cols(y)

    def f(img):
        return 0.5 * np.sum((phi @ to_blocks(img) - y) ** 2)

    grad = from_blocks(phi.T @ (phi @ to_blocks(x0) - y), x0.shape)
    d = x - x0
    bound = f(x0) + np.sum(grad * d) + 0.5 * l1 * np.sum(d * d)
    return bool(f(x) <= bound + 1e-9)
