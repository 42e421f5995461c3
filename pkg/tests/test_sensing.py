import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrcs import tensor as T
from lrcs.sensing import (BLOCK_SIZE, STANDARD_RATIOS, MeasurementOperator, Measurements,
                          from_blocks, gram_apply, init_measurement, init_reconstruction,
                          orth_loss, ratio_to_m, sample, sample_conv, to_blocks)
from lrcs.tensor import ShapeError, Tensor, grad_check


def op64(phi):
    return MeasurementOperator(Tensor(np.asarray(phi, dtype=np.float64)), len(phi) / BLOCK_SIZE)


def explicit_measure(phi, img):
    """Loop over blocks, flatten each row-major and multiply."""
    h, w = img.shape
    cols = []
    for bi in range(h // 33):
        for bj in range(w // 33):
            cols.append(phi @ img[bi * 33:(bi + 1) * 33, bj * 33:(bj + 1) * 33].reshape(-1))
    return np.stack(cols, axis=1)


def explicit_back(phi, y, h, w):
    out = np.zeros((h, w))
    b = 0
    for bi in range(h // 33):
        for bj in range(w // 33):
            out[bi * 33:(bi + 1) * 33, bj * 33:(bj + 1) * 33] = (phi.T @ y[:, b]).reshape(33, 33)
            b += 1
    return out


# ------------------------------------------------------------- ratio_to_m

@pytest.mark.parametrize("ratio,m", [(1.0, 1089), (0.25, 272), (0.01, 10)])
def test_ratio_to_m_examples(ratio, m):
    assert ratio_to_m(ratio) == m


def test_standard_ratio_counts_use_floor():
    # floor(r * 1089); the 10% and 50% entries land on 108 and 544
    assert [ratio_to_m(r) for r in STANDARD_RATIOS] == [10, 43, 108, 272, 544]


def test_ratio_to_m_clamps_to_one():
    assert ratio_to_m(1e-6) == 1


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.01])
def test_ratio_out_of_range(bad):
    with pytest.raises(ValueError):
        ratio_to_m(bad)


# ------------------------------------------------------- init_measurement

@pytest.mark.parametrize("seed", [0, 1, 7])
def test_init_rows_orthonormal(seed):
    op = init_measurement(0.1, seed, dtype=np.float64)
    gram = op.phi.data @ op.phi.data.T
    assert np.linalg.norm(gram - np.eye(op.m)) < 1e-5


def test_init_float32_rows_orthonormal():
    op = init_measurement(0.25, 3)
    assert op.phi.dtype == np.float32
    assert np.linalg.norm(op.phi.data @ op.phi.data.T - np.eye(op.m)) < 1e-5


def test_init_deterministic():
    a, b = init_measurement(0.04, 5), init_measurement(0.04, 5)
    assert np.array_equal(a.phi.data, b.phi.data)
    assert not np.array_equal(a.phi.data, init_measurement(0.04, 6).phi.data)


def test_init_shape():
    op = init_measurement(0.25)
    assert op.phi.shape == (272, 1089) and op.m == 272 and op.n == 1089
    assert op.phi.requires_grad


# ----------------------------------------------------------------- sample

def test_zero_image_gives_zero_measurements():
    op = init_measurement(0.1, dtype=np.float64)
    assert not sample(op, Tensor(np.zeros((1, 66, 33)))).y.data.any()


def test_full_rank_round_trip(rng):
    op = init_measurement(1.0, dtype=np.float64)
    x = rng.random((1, 33, 33))
    back = init_reconstruction(op, sample(op, Tensor(x)))
    assert np.max(np.abs(back.data - x)) < 1e-5


def test_conv_and_matmul_paths_agree(rng):
    op = init_measurement(0.1, 2, dtype=np.float64)
    x = Tensor(rng.random((1, 66, 99)))
    a, b = sample(op, x), sample_conv(op, x)
    assert a.grid == b.grid == (1, 2, 3)
    assert np.max(np.abs(a.y.data - b.y.data)) < 1e-6


def test_sample_matches_explicit_blocks(rng):
    phi = rng.standard_normal((20, 1089))
    img = rng.random((66, 99))
    y = sample(op64(phi), Tensor(img[None])).y.data
    assert np.allclose(y, explicit_measure(phi, img), atol=1e-10)


def test_sample_batched_equals_single(rng):
    op = init_measurement(0.04, dtype=np.float64)
    imgs = rng.random((3, 1, 33, 66))
    yb = sample(op, Tensor(imgs))
    assert yb.batched and yb.y.shape == (op.m, 6)
    for i in range(3):
        yi = sample(op, Tensor(imgs[i])).y.data
        assert np.allclose(yb.y.data[:, 2 * i:2 * i + 2], yi)


def test_sample_rejects_non_multiple():
    op = init_measurement(0.1)
    with pytest.raises(ShapeError):
        sample(op, Tensor(np.zeros((1, 34, 33))))


def test_sample_linear(rng):
    op = init_measurement(0.1, dtype=np.float64)
    x1, x2 = rng.random((1, 33, 66)), rng.random((1, 33, 66))
    y = sample(op, Tensor(2.5 * x1 - 0.7 * x2)).y.data
    y1, y2 = sample(op, Tensor(x1)).y.data, sample(op, Tensor(x2)).y.data
    assert np.max(np.abs(y - (2.5 * y1 - 0.7 * y2))) < 1e-5


def test_block_independence(rng):
    op = init_measurement(0.1, dtype=np.float64)
    x = rng.random((1, 66, 66))
    y0 = sample(op, Tensor(x)).y.data
    x[0, 40, 50] += 1.0        # inside block (1, 1), column index 3
    y1 = sample(op, Tensor(x)).y.data
    changed = np.flatnonzero(np.any(y0 != y1, axis=0))
    assert changed.tolist() == [3]


# --------------------------------------------------- init_reconstruction

def test_zero_measurements_give_zero_image():
    op = init_measurement(0.1)
    y = Measurements(Tensor(np.zeros((op.m, 4), dtype=np.float32)), (1, 2, 2))
    x = init_reconstruction(op, y)
    assert x.shape == (1, 66, 66) and not x.data.any()


def test_resample_recovers_measurements(rng):
    op = init_measurement(0.25, 1, dtype=np.float64)
    y = Measurements(Tensor(rng.standard_normal((op.m, 2))), (1, 1, 2))
    again = sample(op, init_reconstruction(op, y)).y.data
    assert np.max(np.abs(again - y.y.data)) < 1e-5


def test_init_reconstruction_matches_explicit(rng):
    phi = rng.standard_normal((15, 1089))
    y = rng.standard_normal((15, 6))
    x = init_reconstruction(op64(phi), Measurements(Tensor(y), (1, 2, 3))).data
    assert np.max(np.abs(x[0] - explicit_back(phi, y, 66, 99))) < 1e-6


def test_init_reconstruction_shape_mismatch():
    op = init_measurement(0.1)
    with pytest.raises(ShapeError):
        init_reconstruction(op, Measurements(Tensor(np.zeros((op.m, 3))), (1, 2, 2)))


def test_sample_back_sample_idempotent(rng):
    op = init_measurement(0.04, 4, dtype=np.float64)
    y = sample(op, Tensor(rng.random((1, 33, 66))))
    y2 = sample(op, init_reconstruction(op, y))
    y3 = sample(op, init_reconstruction(op, y2))
    assert np.allclose(y2.y.data, y.y.data, atol=1e-10)
    assert np.allclose(y3.y.data, y2.y.data, atol=1e-10)


def test_gram_apply_is_projection(rng):
    op = init_measurement(0.1, dtype=np.float64)
    x = Tensor(rng.random((1, 33, 33)))
    p1 = gram_apply(op, x)
    p2 = gram_apply(op, p1)
    assert np.allclose(p1.data, p2.data, atol=1e-10)


def test_block_helpers_round_trip(rng):
    img = rng.random((66, 99))
    cols = to_blocks(img)
    assert cols.shape == (1089, 6)
    assert np.array_equal(cols[:, 1], img[0:33, 33:66].reshape(-1))
    assert np.array_equal(from_blocks(cols, img.shape), img)


# --------------------------------------------------------------- orth loss

def test_orth_loss_zero_for_orthonormal_rows():
    op = init_measurement(0.1, dtype=np.float64)
    assert float(orth_loss(op).data) < 1e-20


def test_orth_loss_scaled_rows():
    q = np.linalg.qr(np.random.default_rng(0).standard_normal((1089, 2)))[0].T
    assert np.isclose(float(orth_loss(op64(2 * q)).data), 4.5)


def test_orth_loss_gradient(rng):
    phi = rng.standard_normal((8, 32))
    err = grad_check(lambda p: orth_loss(MeasurementOperator(p, 8 / 1089)), [phi])
    assert err < 1e-5


@given(m=st.integers(1, 6), n=st.integers(6, 12), seed=st.integers(0, 2**31 - 1),
       scale=st.floats(0.1, 3.0))
def test_orth_loss_nonnegative_and_zero_iff_orthonormal(m, n, seed, scale):
    r = np.random.default_rng(seed)
    q = np.linalg.qr(r.standard_normal((n, m)))[0].T
    op = MeasurementOperator(Tensor(q), m / BLOCK_SIZE)
    assert float(orth_loss(op).data) < 1e-10
    bent = MeasurementOperator(Tensor(q * scale + 0.01 * r.standard_normal(q.shape)), 0.1)
    val = float(orth_loss(bent).data)
    assert val >= 0
    if abs(scale - 1) > 0.05:
        assert val > 1e-10


def test_phi_shared_between_sample_and_back(rng):
    op = init_measurement(0.04, dtype=np.float64)
    x = Tensor(rng.random((1, 33, 33)))
    out = init_reconstruction(op, sample(op, x))
    T.backward(T.tsum(out))
    # both uses of phi feed one gradient
    assert op.phi.grad is not None and op.phi.grad.shape == op.phi.shape
