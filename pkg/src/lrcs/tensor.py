"""Small N-d array engine with reverse-mode differentiation.

Only the primitives the unfolded reconstruction network needs are provided.
Every op records its parents and a local-gradient rule on the output tensor;
``backward`` walks that record in reverse topological order.

Broadcasting is limited to scalar (shape ``()``) times tensor.  Any other
shape disagreement raises :class:`ShapeError`.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_MAGIC = b"LRCS"
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_forward", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._forward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, tuple(shape))

    def sum(self):
        return tsum(self)

    def backward(self):
        backward(self)


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _record(data, parents, backward_fn, op, forward_fn):
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._forward = forward_fn
    return out


# ---------------------------------------------------------------- arithmetic

def _binary_shapes(a, b, name):
    if a.shape == b.shape:
        return None
    if a.ndim == 0:
        return "a"
    if b.ndim == 0:
        return "b"
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g, scalar_side):
    return np.asarray(g.sum()) if scalar_side else g


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    which = _binary_shapes(a, b, "add")

    def bw(g):
        return _reduce_to(g, which == "a"), _reduce_to(g, which == "b")

    return _record(a.data + b.data, (a, b), bw, "add", np.add)


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    which = _binary_shapes(a, b, "sub")

    def bw(g):
        return _reduce_to(g, which == "a"), _reduce_to(-g, which == "b")

    return _record(a.data - b.data, (a, b), bw, "sub", np.subtract)


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    which = _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, which == "a"), _reduce_to(g * ad, which == "b")

    return _record(ad * bd, (a, b), bw, "mul", np.multiply)


def tsum(x):
    """Sum of all entries, as a shape-``()`` tensor."""
    shape, dtype = x.shape, x.dtype

    def bw(g):
        return (np.full(shape, g, dtype=dtype),)

    return _record(np.asarray(x.data.sum()), (x,), bw, "sum",
                   lambda a: np.asarray(a.sum()))


def mean(x):
    return mul(tsum(x), 1.0 / x.size)


def relu(x):
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu",
                   lambda a: np.where(a > 0, a, 0).astype(a.dtype))


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return _record(x.data.reshape(shape), (x,), bw, "reshape",
                   lambda a: a.reshape(shape))


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _record(x.data.transpose(axes), (x,), bw, "permute",
                   lambda a: a.transpose(axes))


def transpose(x):
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


# ------------------------------------------------------------------- linear

def matmul(a, b):
    """Matrix product of ``m x k`` and ``k x n`` operands.

    Stacks of matrices with identical leading extents are also accepted
    (``b x m x k`` times ``b x k x n``).
    """
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.ndim == b.ndim and a.ndim in (2, 3)
          and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2])
    if not ok:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(ad @ bd, (a, b), bw, "matmul", np.matmul)


def concat(parts, axis=0):
    """Join tensors along ``axis``; every other extent must agree."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no tensors given")
    nd = parts[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat: axis {axis} out of range for rank {nd}")
    axis %= nd
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {p.shape} do not conform "
                             f"off axis {axis}")
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, bw,
                   "concat", lambda *arrs: np.concatenate(arrs, axis=axis))


# -------------------------------------------------------------- convolution

def _lift4(x):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a C x H x W (or batched) tensor, got shape {x.shape}")


def _flat_padded(x, padding, tail):
    """Channels-last copy of ``x`` with zero padding, flattened to rows.

    Every kernel offset ``(i, j)`` then maps to one contiguous row range,
    so each tap is a single BLAS product with no gather.
    """
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    flat = np.zeros((n * hp * wp + tail, c), dtype=x.dtype)
    flat[:n * hp * wp].reshape(n, hp, wp, c)[:, padding:padding + h,
                                             padding:padding + w] = x.transpose(0, 2, 3, 1)
    return flat


def _conv_forward(x, w, stride, padding):
    """Returns the output and the saved input representation for backward."""
    n, c, h, wd = x.shape
    o, k = w.shape[0], w.shape[-1]
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if stride == 1:
        rows = n * hp * wp
        xf = _flat_padded(x, padding, (k - 1) * wp + (k - 1))
        taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # k x k x C_in x C_out
        out = xf[:rows] @ taps[0, 0]
        for i in range(k):
            for j in range(k):
                if i or j:
                    s = i * wp + j
                    out += xf[s:s + rows] @ taps[i, j]
        out = out.reshape(n, hp, wp, o)[:, :ho, :wo].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), xf
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), xp


def _conv_backward_taps(g, saved, w, wp, rows):
    """One pair of products per kernel offset; best when C_out is not small."""
    n, o, ho, wo = g.shape
    c, k = w.shape[1], w.shape[-1]
    gf = np.zeros((rows, o), dtype=g.dtype)
    gf.reshape(n, -1, wp, o)[:, :ho, :wo] = g.transpose(0, 2, 3, 1)
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    dxf = np.zeros_like(saved)
    dw = np.empty((k, k, c, o), dtype=w.dtype)
    for i in range(k):
        for j in range(k):
            s = i * wp + j
            dw[i, j] = saved[s:s + rows].T @ gf
            dxf[s:s + rows] += gf @ taps[i, j].T
    return dxf, dw.transpose(3, 2, 0, 1)


def _conv_backward_fused(g, saved, w, wp, rows):
    """Shifted copies of the output gradient, one for each kernel offset,
    so both gradients are single products; best when C_out << C_in."""
    n, o, ho, wo = g.shape
    c, k = w.shape[1], w.shape[-1]
    gs = np.zeros((len(saved), k * k, o), dtype=g.dtype)
    gt = g.transpose(0, 2, 3, 1)
    for t in range(k * k):
        s = (t // k) * wp + t % k
        gs[s:s + rows, t].reshape(n, -1, wp, o)[:, :ho, :wo] = gt
    gs = gs.reshape(len(saved), k * k * o)
    dw = (saved.T @ gs).reshape(c, k, k, o)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1).reshape(k * k * o, c))
    return gs @ taps, dw.transpose(3, 0, 1, 2)


def _conv_backward(g, saved, w, stride, padding, in_shape):
    n, c, h, wd = in_shape
    o, k = w.shape[0], w.shape[-1]
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = g.shape[2], g.shape[3]
    if stride == 1:
        rows = n * hp * wp
        if c >= 2 * o:
            dxf, dw = _conv_backward_fused(g, saved, w, wp, rows)
        else:
            dxf, dw = _conv_backward_taps(g, saved, w, wp, rows)
        dx = dxf[:rows].reshape(n, hp, wp, c)[:, padding:padding + h,
                                              padding:padding + wd]
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw
    win = np.lib.stride_tricks.sliding_window_view(saved, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    dxp = np.zeros_like(saved)
    # each output cell scatters its kernel-weighted gradient back
    contrib = np.einsum("nohw,ocij->nchwij", g, w, optimize=True)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += contrib[..., i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation (no kernel flip).

    ``x`` is ``C_in x H x W`` or batched ``n x C_in x H x W``; ``kernel`` is
    ``C_out x C_in x k x k``; ``bias`` is an optional length-``C_out`` tensor.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    x4, squeeze = _lift4(x)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be C_out x C_in x k x k, got {kernel.shape}")
    if kernel.shape[1] != x4.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} has {x4.shape[1]} channels, "
                         f"kernel {kernel.shape} expects {kernel.shape[1]}")
    k = kernel.shape[2]
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if x4.shape[2] + 2 * padding < k or x4.shape[3] + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded "
                         f"input {x.shape} (padding={padding})")
    parents = [x4, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
        parents.append(bias)

    out, saved = _conv_forward(x4.data, kernel.data, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]
    wd, in_shape = kernel.data, x4.shape

    def bw(g):
        dx, dw = _conv_backward(g, saved, wd, stride, padding, in_shape)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    def fw(xa, wa, *ba):
        o = _conv_forward(xa, wa, stride, padding)[0]
        return o + ba[0][None, :, None, None] if ba else o

    out_t = _record(out, parents, bw, "conv2d", fw)
    if squeeze:
        out_t = reshape(out_t, out_t.shape[1:])
    return out_t


# ------------------------------------------------------- pooling / shuffle

def _pool_matrix(n_in, n_out, dtype):
    p = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p


def adaptive_avg_pool(x, out_h, out_w):
    """Average-pool the last two axes onto an ``out_h x out_w`` grid.

    Cell ``(i, j)`` averages rows ``[floor(i H/out_h), ceil((i+1) H/out_h))``
    and the analogous column window.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"adaptive_avg_pool: need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"adaptive_avg_pool: target {out_h}x{out_w} exceeds input {h}x{w}")
    ph = _pool_matrix(h, out_h, x.dtype)
    pw = _pool_matrix(w, out_w, x.dtype)

    def bw(g):
        return (ph.T @ g @ pw,)

    return _record(ph @ x.data @ pw.T, (x,), bw, "adaptive_avg_pool",
                   lambda a: ph @ a @ pw.T)


def _shuffle(a, s):
    *lead, c, h, w = a.shape
    a = a.reshape(*lead, c // (s * s), s, s, h, w)
    n = len(lead)
    a = a.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return a.reshape(*lead, c // (s * s), h * s, w * s)


def _unshuffle(a, s):
    *lead, c, h, w = a.shape
    a = a.reshape(*lead, c, h // s, s, w // s, s)
    n = len(lead)
    a = a.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return a.reshape(*lead, c * s * s, h // s, w // s)


def pixel_shuffle(x, s):
    """Rearrange ``(C s^2) x H x W`` into ``C x sH x sW``.

    Output ``[c, h s + i, w s + j]`` takes input ``[c s^2 + i s + j, h, w]``.
    """
    x = as_tensor(x)
    if x.ndim < 3 or s < 1 or x.shape[-3] % (s * s):
        raise ShapeError(f"pixel_shuffle: channels of {x.shape} not divisible by {s}^2")

    def bw(g):
        return (_unshuffle(g, s),)

    return _record(_shuffle(x.data, s), (x,), bw, "pixel_shuffle",
                   lambda a: _shuffle(a, s))


def pixel_unshuffle(x, s):
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    if x.ndim < 3 or s < 1 or x.shape[-1] % s or x.shape[-2] % s:
        raise ShapeError(f"pixel_unshuffle: spatial extents of {x.shape} not divisible by {s}")

    def bw(g):
        return (_shuffle(g, s),)

    return _record(_unshuffle(x.data, s), (x,), bw, "pixel_unshuffle",
                   lambda a: _unshuffle(a, s))


# ----------------------------------------------------------------- backward

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Leaf gradients accumulate into an existing ``grad``; contributions from
    multiple uses of a tensor are summed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


@dataclass
class GradGraph:
    """Recorded operations of one forward pass, in execution order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output):
        return cls([n for n in _topo_order(output) if n.requires_grad])

    def replay(self):
        """Recompute every recorded op from the leaves; returns the output data."""
        values = {}
        for node in self.nodes:
            if node._forward is None:
                values[id(node)] = node.data
                continue
            args = [values.get(id(p), p.data) for p in node._parents]
            values[id(node)] = node._forward(*args)
        return values[id(self.nodes[-1])]


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------- grad check

def grad_check(fn: Callable, inputs: Sequence[np.ndarray], eps: float = 1e-6,
               samples: int | None = None, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` maps tensors built from ``inputs`` to a scalar tensor.  The error
    at each coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``.  With
    ``samples`` set, only that many randomly chosen coordinates per input
    are checked.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    def f():
        with no_grad():
            return float(fn(*[Tensor(a) for a in arrays]).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = rng.choice(flat.size, size=samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            ana = float(grad.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            worst = max(worst, err)
    return worst


# ------------------------------------------------------------ serialization

def tensor_to_bytes(arr) -> bytes:
    """Encode as ``LRCS``, u32 rank, u32 extents, then little-endian f32 row-major."""
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    head = _MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor at ``offset``; returns ``(array, next_offset)``."""
    if bytes(buf[offset:offset + 4]) != _MAGIC:
        raise ValueError(f"bad tensor magic at byte {offset}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return arr.reshape(shape).astype(np.float32), start + 4 * count
