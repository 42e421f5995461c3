import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrcs import tensor as T
from lrcs.tensor import GradGraph, ShapeError, Tensor, backward, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- oracles

def naive_conv(x, w, b=None, stride=1, padding=0):
    """Direct six-loop cross-correlation."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def brute_pool(x, oh, ow):
    c, h, w = x.shape
    out = np.zeros((c, oh, ow))
    for i in range(oh):
        r0, r1 = (i * h) // oh, -((-(i + 1) * h) // oh)
        for j in range(ow):
            c0, c1 = (j * w) // ow, -((-(j + 1) * w) // ow)
            out[:, i, j] = x[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return out


def loop_shuffle(x, s):
    cs2, h, w = x.shape
    c = cs2 // (s * s)
    out = np.zeros((c, h * s, w * s))
    for ch in range(c):
        for hh in range(h):
            for ww in range(w):
                for i in range(s):
                    for j in range(s):
                        out[ch, hh * s + i, ww * s + j] = x[ch * s * s + i * s + j, hh, ww]
    return out


# ----------------------------------------------------------------- basics

def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(3)).dtype == np.float64


def test_shape_matches_stored_values():
    t = Tensor(np.zeros((2, 3, 4)))
    assert int(np.prod(t.shape)) == t.data.size


def test_only_scalar_broadcasting():
    a = Tensor(np.ones((2, 3)))
    assert np.array_equal((a * 2.0).data, np.full((2, 3), 2.0))
    with pytest.raises(ShapeError):
        T.add(a, Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        T.mul(a, Tensor(np.ones((3, 2))))


# ----------------------------------------------------------------- matmul

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_outer_product():
    out = T.matmul(Tensor([[1.0], [2.0]]), Tensor([[3.0, 4.0]]))
    assert np.array_equal(out.data, [[3, 4], [6, 8]])


def test_matmul_gradient_of_sum(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    err = grad_check(lambda x, y: T.tsum(T.matmul(x, y)), [a, b], eps=1e-6)
    assert err < 1e-5
    la, lb = leaf(a), leaf(b)
    backward(T.tsum(T.matmul(la, lb)))
    # d/dA sum(AB) = 1 B^T
    assert np.allclose(la.grad, np.ones((4, 3)) @ b.T)


def test_matmul_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# ----------------------------------------------------------------- conv2d

def test_conv_unit_kernel_is_identity(rng):
    x = rng.standard_normal((1, 7, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 9.0


def test_conv_gradient_vs_finite_differences(rng):
    x, k = rng.standard_normal((2, 8, 8)), rng.standard_normal((4, 2, 3, 3))
    w = rng.standard_normal((4, 8, 8))
    err = grad_check(lambda a, b: T.tsum(T.mul(T.conv2d(a, b, padding=1), Tensor(w))),
                     [x, k], eps=1e-6)
    assert err < 1e-5


@pytest.mark.parametrize("c_in,c_out,k,padding", [(6, 2, 3, 1), (2, 5, 3, 0), (4, 1, 5, 2),
                                                   (3, 3, 1, 0)])
def test_conv_backward_paths_agree(rng, c_in, c_out, k, padding):
    from lrcs.tensor import _conv_backward_fused, _conv_backward_taps, _conv_forward

    x, w = rng.standard_normal((2, c_in, 7, 9)), rng.standard_normal((c_out, c_in, k, k))
    out, saved = _conv_forward(x, w, 1, padding)
    g = rng.standard_normal(out.shape)
    wp = 9 + 2 * padding
    rows = 2 * (7 + 2 * padding) * wp
    dxa, dwa = _conv_backward_taps(g, saved, w, wp, rows)
    dxb, dwb = _conv_backward_fused(g, saved, w, wp, rows)
    assert np.allclose(dxa, dxb, atol=1e-12) and np.allclose(dwa, dwb, atol=1e-12)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


@given(c_in=st.integers(1, 3), c_out=st.integers(1, 3), h=st.integers(1, 9),
       w=st.integers(1, 9), k=st.sampled_from([1, 2, 3, 5]), stride=st.integers(1, 3),
       padding=st.integers(0, 2), seed=st.integers(0, 2**31 - 1))
def test_conv_matches_naive_loops(c_in, c_out, h, w, k, stride, padding, seed):
    if h + 2 * padding < k or w + 2 * padding < k:
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((c_in, h, w))
    kern = r.standard_normal((c_out, c_in, k, k))
    b = r.standard_normal(c_out)
    out = T.conv2d(Tensor(x), Tensor(kern), Tensor(b), stride=stride, padding=padding)
    assert np.allclose(out.data, naive_conv(x, kern, b, stride, padding), atol=1e-12)


def test_conv_batched_equals_per_image(rng):
    x = rng.standard_normal((3, 2, 6, 6))
    k = rng.standard_normal((4, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), padding=1).data
    for i in range(3):
        assert np.allclose(out[i], T.conv2d(Tensor(x[i]), Tensor(k), padding=1).data)


@given(m=st.integers(1, 3), n=st.integers(1, 3))
def test_block_stride_conv_output_count(m, n):
    x = Tensor(np.zeros((1, 33 * m, 33 * n)))
    out = T.conv2d(x, Tensor(np.zeros((2, 1, 33, 33))), stride=33)
    assert out.shape[1:] == (m, n)


# ------------------------------------------------------------------- relu

def test_relu_values():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = np.array([0.5, 1.0, 3.0])
    assert np.array_equal(T.relu(Tensor(x)).data, x)


def test_relu_gradient_mask(rng):
    x = rng.standard_normal(50)
    x[np.abs(x) < 0.05] = 0.5
    t = leaf(x)
    backward(T.tsum(T.relu(t)))
    assert np.array_equal(t.grad, (x > 0).astype(float))
    assert grad_check(lambda a: T.tsum(T.mul(T.relu(a), T.relu(a))), [x]) < 1e-6


def test_relu_subgradient_at_zero_is_zero():
    t = leaf([0.0])
    backward(T.tsum(T.relu(t)))
    assert t.grad[0] == 0.0


# ----------------------------------------------------------------- concat

def test_concat_shapes(rng):
    out = T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5)))], axis=1)
    assert out.shape == (2, 8)
    x = rng.standard_normal((3, 4))
    assert np.array_equal(T.concat([Tensor(x)], axis=0).data, x)


def test_concat_gradient_routes_by_slice(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
    w = rng.standard_normal((2, 5))
    fn = lambda x, y: T.tsum(T.mul(T.concat([x, y], axis=1), Tensor(w)))  # noqa: E731
    assert grad_check(fn, [a, b]) < 1e-6
    la, lb = leaf(a), leaf(b)
    backward(fn(la, lb))
    assert np.array_equal(la.grad, w[:, :3]) and np.array_equal(lb.grad, w[:, 3:])


def test_concat_errors():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((2, 3)))], axis=2)
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


# ---------------------------------------------------------------- pooling

def test_pool_identity_and_ones(rng):
    x = rng.standard_normal((2, 5, 4))
    assert np.allclose(T.adaptive_avg_pool(Tensor(x), 5, 4).data, x)
    assert T.adaptive_avg_pool(Tensor(np.ones((1, 4, 4))), 1, 1).data[0, 0, 0] == 1.0


def test_pool_known_values():
    x = np.arange(1.0, 17.0).reshape(1, 4, 4)
    out = T.adaptive_avg_pool(Tensor(x), 2, 2).data
    assert np.allclose(out, [[[3.5, 5.5], [11.5, 13.5]]])
    assert np.allclose(out, brute_pool(x, 2, 2))


@given(h=st.integers(1, 12), w=st.integers(1, 12), data=st.data())
def test_pool_matches_brute_force(h, w, data):
    oh = data.draw(st.integers(1, h))
    ow = data.draw(st.integers(1, w))
    x = np.random.default_rng(h * 100 + w).standard_normal((2, h, w))
    assert np.allclose(T.adaptive_avg_pool(Tensor(x), oh, ow).data, brute_pool(x, oh, ow))


def test_pool_target_too_large():
    with pytest.raises(ShapeError):
        T.adaptive_avg_pool(Tensor(np.ones((1, 3, 3))), 4, 1)


# ---------------------------------------------------------- pixel shuffle

def test_shuffle_identity_for_s1(rng):
    x = rng.standard_normal((3, 4, 5))
    assert np.array_equal(T.pixel_shuffle(Tensor(x), 1).data, x)


def test_shuffle_definition():
    out = T.pixel_shuffle(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)), 2)
    assert np.array_equal(out.data, [[[1, 2], [3, 4]]])


@given(c=st.integers(1, 3), s=st.integers(1, 4), h=st.integers(1, 4), w=st.integers(1, 4))
def test_shuffle_matches_loops_and_round_trips(c, s, h, w):
    x = np.random.default_rng(c + 10 * s + 100 * h + 1000 * w).standard_normal((c * s * s, h, w))
    out = T.pixel_shuffle(Tensor(x), s).data
    assert np.array_equal(out, loop_shuffle(x, s))
    assert np.array_equal(T.pixel_unshuffle(Tensor(out), s).data, x)
    assert np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(Tensor(out), s), s).data, out)


def test_shuffle_bad_channel_count():
    with pytest.raises(ShapeError):
        T.pixel_shuffle(Tensor(np.ones((3, 2, 2))), 2)


# --------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = leaf([1.0, 2.0, 3.0])
    backward(T.tsum(x))
    assert np.array_equal(x.grad, [1, 1, 1])


def test_backward_zero_times_x():
    x = leaf([1.0, -2.0])
    backward(T.tsum(T.mul(0.0, x)))
    assert np.array_equal(x.grad, [0, 0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        backward(T.mul(leaf([1.0, 2.0]), 2.0))


def test_shared_leaf_accumulates(rng):
    a = rng.standard_normal(4)
    x = leaf(a)
    backward(T.tsum(T.mul(x, x)) + T.tsum(T.mul(3.0, x)))
    assert np.allclose(x.grad, 2 * a + 3)
    # a second backward adds onto the leaf gradient
    backward(T.tsum(x))
    assert np.allclose(x.grad, 2 * a + 4)


def test_every_reachable_leaf_gets_a_gradient(rng):
    a, b = leaf(rng.standard_normal((2, 2))), leaf(rng.standard_normal((2, 2)))
    c = Tensor(rng.standard_normal((2, 2)))
    backward(T.tsum(T.matmul(T.add(a, c), b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert c.grad is None


# ------------------------------------------------------------- grad graph

def test_graph_is_topological_and_replays_bit_exact(rng):
    x = leaf(rng.standard_normal((2, 6, 6)))
    k = leaf(rng.standard_normal((3, 2, 3, 3)))
    h = T.relu(T.conv2d(x, k, padding=1))
    out = T.tsum(T.mul(T.adaptive_avg_pool(h, 2, 3), 0.5))
    graph = GradGraph.trace(out)
    pos = {id(n): i for i, n in enumerate(graph.nodes)}
    for node in graph.nodes:
        for p in node._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(node)]
    assert np.array_equal(graph.replay(), out.data)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


# ------------------------------------------------------------- grad check

def test_grad_check_linear():
    assert grad_check(lambda x: T.tsum(T.mul(2.0, x)), [np.array([1.0, -3.0, 2.0])]) < 1e-8


def test_grad_check_quadratic_hand_oracle():
    x = np.array([1.0, 2.0])
    t = leaf(x)
    backward(T.tsum(T.mul(t, t)))
    assert np.array_equal(t.grad, [2.0, 4.0])
    assert grad_check(lambda a: T.tsum(T.mul(a, a)), [x], eps=1e-5) < 1e-7


PRIMITIVES = {
    "add": (lambda a, b: T.add(a, b), 2),
    "sub": (lambda a, b: T.sub(a, b), 2),
    "mul": (lambda a, b: T.mul(a, b), 2),
    "matmul": (lambda a, b: T.matmul(a, T.transpose(b)), 2),
    "concat": (lambda a, b: T.concat([a, b], axis=0), 2),
    "relu": (lambda a: T.relu(a), 1),
    "permute": (lambda a: T.permute(a, (1, 0)), 1),
    "reshape": (lambda a: T.reshape(a, (a.size,)), 1),
    "pool": (lambda a: T.adaptive_avg_pool(a, max(1, a.shape[0] // 2), 1), 1),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@given(h=st.integers(1, 5), w=st.integers(1, 5), seed=st.integers(0, 2**31 - 1))
def test_primitive_gradients_random_shapes(name, h, w, seed):
    fn, arity = PRIMITIVES[name]
    r = np.random.default_rng(seed)
    inputs = [r.standard_normal((h, w)) for _ in range(arity)]
    if name == "relu":
        inputs = [np.where(np.abs(a) < 0.05, 0.5, a) for a in inputs]
    probe = fn(*[Tensor(a) for a in inputs])
    weights = r.standard_normal(probe.shape)
    err = grad_check(lambda *ts: T.tsum(T.mul(fn(*ts), Tensor(weights))), inputs)
    assert err < 1e-4


@given(c_in=st.integers(1, 3), c_out=st.integers(1, 3), size=st.integers(3, 7),
       k=st.sampled_from([1, 3]), stride=st.integers(1, 2), seed=st.integers(0, 2**31 - 1))
def test_conv_gradients_random_shapes(c_in, c_out, size, k, stride, seed):
    r = np.random.default_rng(seed)
    x, kern, b = r.standard_normal((c_in, size, size)), r.standard_normal((c_out, c_in, k, k)), \
        r.standard_normal(c_out)
    fn = lambda a, kk, bb: T.conv2d(a, kk, bb, stride=stride, padding=k // 2)  # noqa: E731
    w = r.standard_normal(fn(Tensor(x), Tensor(kern), Tensor(b)).shape)
    err = grad_check(lambda *ts: T.tsum(T.mul(fn(*ts), Tensor(w))), [x, kern, b])
    assert err < 1e-4


@given(s=st.integers(1, 3), c=st.integers(1, 2), seed=st.integers(0, 2**31 - 1))
def test_shuffle_gradients_random_shapes(s, c, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((c * s * s, 2, 3))
    w = r.standard_normal((c, 2 * s, 3 * s))
    assert grad_check(lambda a: T.tsum(T.mul(T.pixel_shuffle(a, s), Tensor(w))), [x]) < 1e-4
    w2 = r.standard_normal((c * s * s, 2, 3))
    assert grad_check(lambda a: T.tsum(T.mul(T.pixel_unshuffle(a, s), Tensor(w2))),
                      [loop_shuffle(x, s)]) < 1e-4


def test_gradient_suite_passes():
    from lrcs.verify import TOLERANCE, gradient_suite

    results = dict(gradient_suite())
    assert results and max(results.values()) < TOLERANCE, results


# ---------------------------------------------------------- serialization

def test_tensor_bytes_round_trip(rng):
    a = rng.standard_normal((3, 1, 4)).astype(np.float32)
    raw = T.tensor_to_bytes(a)
    assert raw[:4] == b"LRCS"
    assert int.from_bytes(raw[4:8], "little") == 3
    back, end = T.tensor_from_bytes(raw + b"tail")
    assert end == len(raw) and np.array_equal(back, a)


def test_tensor_bytes_little_endian_layout():
    raw = T.tensor_to_bytes(np.array([1.0, 2.0], dtype=np.float32))
    assert raw == b"LRCS" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + \
        np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_tensor_bytes_bad_magic():
    with pytest.raises(ValueError):
        T.tensor_from_bytes(b"XXXX" + bytes(8))
