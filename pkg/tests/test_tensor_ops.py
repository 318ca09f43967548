"""Forward-pass correctness of every layer against naive loop references.

Each oracle below recomputes the op with plain Python loops (or a direct
formula) in float64. The library path uses float32 GEMMs, so comparisons
allow a few ULPs of float32 noise; a real indexing or geometry bug shows
up as O(1) error, far outside these tolerances.
"""

import numpy as np
import pytest

from qutelab.rng import Rng
from qutelab.tensor import (NumericError, Param, Tensor, add, conv2d,
                            cross_entropy, dense, depthwise_conv2d, dropout,
                            global_avg_pool, maxpool2x2, no_grad, relu, scale,
                            softmax)

TOL = dict(rtol=1e-4, atol=1e-5)


def conv2d_loops(x, w, b, stride=1, same=True):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if same:
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        oh, ow = h, wd
    else:
        oh = (h - kh) // stride + 1
        ow = (wd - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for a in range(kh):
                            for d in range(kw):
                                acc += x[i, c, y * stride + a, z * stride + d] * w[o, c, a, d]
                    out[i, o, y, z] = acc + b[o]
    return out


def depthwise_loops(x, w, b):
    n, c, h, wd = x.shape
    _, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, c, h, wd))
    for i in range(n):
        for ch in range(c):
            for y in range(h):
                for z in range(wd):
                    acc = 0.0
                    for a in range(kh):
                        for d in range(kw):
                            acc += xp[i, ch, y + a, z + d] * w[ch, a, d]
                    out[i, ch, y, z] = acc + b[ch]
    return out


def maxpool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(n):
        for ch in range(c):
            for y in range(h // 2):
                for z in range(w // 2):
                    out[i, ch, y, z] = x[i, ch, 2 * y:2 * y + 2, 2 * z:2 * z + 2].max()
    return out


def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# --- convolutions ------------------------------------------------------------


def test_conv2d_same_matches_loops(rng_np):
    x = rng_np.normal(size=(3, 2, 6, 5)).astype(np.float32)
    w = rng_np.normal(size=(4, 2, 3, 3)).astype(np.float32)
    b = rng_np.normal(size=(4,)).astype(np.float32)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), padding="same").data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b), **TOL)


def test_conv2d_valid_and_stride(rng_np):
    x = rng_np.normal(size=(2, 3, 9, 9)).astype(np.float32)
    w = rng_np.normal(size=(5, 3, 3, 3)).astype(np.float32)
    b = rng_np.normal(size=(5,)).astype(np.float32)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding="valid").data
    want = conv2d_loops(x, w, b, stride=2, same=False)
    assert got.shape == (2, 5, 4, 4)
    np.testing.assert_allclose(got, want, **TOL)


def test_conv2d_1x1_is_channel_mix(rng_np):
    x = rng_np.normal(size=(2, 6, 4, 4)).astype(np.float32)
    w = rng_np.normal(size=(3, 6, 1, 1)).astype(np.float32)
    b = np.zeros(3, dtype=np.float32)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    want = np.einsum("nchw,oc->nohw", x.astype(np.float64), w[:, :, 0, 0])
    np.testing.assert_allclose(got, want, **TOL)


def test_conv2d_rejects_channel_mismatch_and_even_same_kernel():
    x = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)), padding="same")
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(1)), padding="weird")


def test_depthwise_matches_loops(rng_np):
    x = rng_np.normal(size=(2, 5, 6, 6)).astype(np.float32)
    w = rng_np.normal(size=(5, 3, 3)).astype(np.float32)
    b = rng_np.normal(size=(5,)).astype(np.float32)
    got = depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, depthwise_loops(x, w, b), **TOL)


def test_depthwise_identity_kernel_passthrough():
    # center-one kernel with zero bias reproduces the input exactly
    x = np.arange(2 * 3 * 4 * 4, dtype=np.float32).reshape(2, 3, 4, 4)
    w = np.zeros((3, 3, 3), dtype=np.float32)
    w[:, 1, 1] = 1.0
    got = depthwise_conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(got, x)


# --- dense / pooling / activations -------------------------------------------


def test_dense_matches_matmul(rng_np):
    x = rng_np.normal(size=(7, 11)).astype(np.float32)
    w = rng_np.normal(size=(11, 4)).astype(np.float32)
    b = rng_np.normal(size=(4,)).astype(np.float32)
    got = dense(Tensor(x), Tensor(w), Tensor(b)).data
    want = x.astype(np.float64) @ w.astype(np.float64) + b
    np.testing.assert_allclose(got, want, **TOL)
    with pytest.raises(ValueError):
        dense(Tensor(np.zeros((2, 3, 4))), Tensor(w), Tensor(b))


def test_relu_clamps_negatives():
    x = np.array([[-2.0, 0.0, 3.5]], dtype=np.float32)
    np.testing.assert_array_equal(relu(Tensor(x)).data, [[0.0, 0.0, 3.5]])


def test_maxpool_matches_loops_and_rejects_odd(rng_np):
    x = rng_np.normal(size=(3, 4, 8, 6)).astype(np.float32)
    got = maxpool2x2(Tensor(x)).data
    np.testing.assert_array_equal(got, maxpool_loops(x))
    with pytest.raises(ValueError):
        maxpool2x2(Tensor(np.zeros((1, 1, 5, 4))))


def test_global_avg_pool(rng_np):
    x = rng_np.normal(size=(4, 3, 5, 7)).astype(np.float32)
    got = global_avg_pool(Tensor(x)).data
    np.testing.assert_allclose(got, x.astype(np.float64).mean(axis=(2, 3)), **TOL)


# --- softmax / cross-entropy --------------------------------------------------


def test_softmax_matches_reference_and_sums_to_one(rng_np):
    z = (rng_np.normal(size=(64, 10)) * 20.0).astype(np.float32)
    p = softmax(Tensor(z)).data
    np.testing.assert_allclose(p, softmax_rows(z), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_shift_invariance():
    z = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    a = softmax(Tensor(z)).data
    b = softmax(Tensor(z + 1000.0)).data
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_cross_entropy_matches_formula(rng_np):
    p = softmax_rows(rng_np.normal(size=(32, 10))).astype(np.float32)
    y = rng_np.integers(0, 10, size=32)
    got = cross_entropy(Tensor(p), y).item()
    want = -np.log(p[np.arange(32), y].astype(np.float64)).mean()
    assert abs(got - want) < 1e-6


def test_cross_entropy_clamps_zero_probability():
    p = np.zeros((2, 3), dtype=np.float32)
    p[:, 0] = 1.0
    out = cross_entropy(Tensor(p), np.array([1, 2]))
    assert np.isfinite(out.item())
    assert out.item() == pytest.approx(-np.log(1e-12), rel=1e-6)


def test_cross_entropy_validates_labels():
    p = np.full((2, 3), 1 / 3, dtype=np.float32)
    with pytest.raises(ValueError):
        cross_entropy(Tensor(p), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(Tensor(p), np.array([0]))


# --- dropout ------------------------------------------------------------------


def test_dropout_identity_paths():
    x = Tensor(np.ones((4, 4), dtype=np.float32))
    np.testing.assert_array_equal(dropout(x, 0.0, Rng(1), active=True).data, x.data)
    np.testing.assert_array_equal(dropout(x, 0.5, Rng(1), active=False).data, x.data)


def test_dropout_mask_values_and_determinism():
    x = Tensor(np.ones((64, 64), dtype=np.float32))
    a = dropout(x, 0.25, Rng(7, stream_id=1)).data
    b = dropout(x, 0.25, Rng(7, stream_id=1)).data
    np.testing.assert_array_equal(a, b)
    vals = np.unique(a)
    np.testing.assert_allclose(vals, [0.0, 1.0 / 0.75], rtol=1e-6)
    # inverted scaling keeps the expectation near 1
    assert abs(a.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        dropout(x, 1.0, Rng(1))


# --- arithmetic and graph plumbing ---------------------------------------------


def test_add_and_scale():
    a = Tensor(np.array([1.0, 2.0], dtype=np.float32))
    b = Tensor(np.array([10.0, 20.0], dtype=np.float32))
    np.testing.assert_array_equal(add(a, b).data, [11.0, 22.0])
    np.testing.assert_array_equal(scale(a, 3.0).data, [3.0, 6.0])
    np.testing.assert_array_equal((2.0 * a).data, [2.0, 4.0])
    with pytest.raises(ValueError):
        add(a, Tensor(np.zeros(3)))


def test_nonfinite_output_raises_numeric_error():
    x = Tensor(np.array([[np.inf, 1.0]], dtype=np.float32))
    with pytest.raises(NumericError):
        relu(x)


def test_no_grad_suppresses_tape():
    w = Param(np.ones((3, 2), dtype=np.float32))
    x = Tensor(np.ones((1, 3), dtype=np.float32))
    with no_grad():
        out = dense(x, w, Param(np.zeros(2, dtype=np.float32)))
    assert not out.requires_grad and out._parents == ()
    with pytest.raises(RuntimeError):
        out.backward()


def test_backward_requires_scalar_or_seed():
    w = Param(np.ones((2, 2), dtype=np.float32))
    out = dense(Tensor(np.ones((3, 2), dtype=np.float32)), w,
                Param(np.zeros(2, dtype=np.float32)))
    with pytest.raises(RuntimeError):
        out.backward()  # vector root, no seed
    out.backward(seed=np.ones_like(out.data))
    np.testing.assert_allclose(w.grad, np.full((2, 2), 3.0), rtol=1e-6)
