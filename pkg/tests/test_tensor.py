import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matsr import tensor as T
from matsr.errors import ConfigurationError, DimensionError, NonFiniteError
from matsr.gradcheck import grad_check
from matsr.oracles import conv2d_loops, layer_norm_two_pass
from matsr.tensor import Tape, Tensor

from conftest import rand_t


# --- conv2d -----------------------------------------------------------------

def test_conv_delta_kernel_is_identity(rng):
    x = rand_t(rng, 1, 1, 5, 5)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    y = T.conv2d(x, Tensor(w, dtype=np.float64), Tensor(np.zeros(1), dtype=np.float64))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_zero_kernel_gives_bias(rng):
    x = rand_t(rng, 2, 3, 4, 5)
    y = T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.array([0.5, -2.0])))
    assert np.all(y.data[:, 0] == 0.5) and np.all(y.data[:, 1] == -2.0)


def test_conv_matches_loop_oracle(rng):
    x, w, b = rand_t(rng, 1, 2, 4, 4), rand_t(rng, 3, 2, 3, 3), rand_t(rng, 3)
    np.testing.assert_allclose(T.conv2d(x, w, b).data, conv2d_loops(x.data, w.data, b.data), atol=1e-6)


def test_conv_f32_matches_loop_oracle(rng):
    x, w = rand_t(rng, 2, 3, 5, 6, dtype=np.float32), rand_t(rng, 4, 3, 5, 1, dtype=np.float32)
    np.testing.assert_allclose(T.conv2d(x, w).data, conv2d_loops(x.data, w.data), atol=1e-5)


def test_conv_errors(rng):
    x = rand_t(rng, 1, 2, 4, 4)
    with pytest.raises(ConfigurationError):
        T.conv2d(x, rand_t(rng, 1, 2, 2, 2))
    with pytest.raises(DimensionError, match="channels"):
        T.conv2d(x, rand_t(rng, 1, 3, 3, 3))
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), rand_t(rng, 1, 2, 3, 3))


def test_conv_linearity_f32(rng):
    x, y = rand_t(rng, 1, 3, 6, 6, dtype=np.float32), rand_t(rng, 1, 3, 6, 6, dtype=np.float32)
    w = rand_t(rng, 2, 3, 3, 3, dtype=np.float32)
    a, b = 0.7, -1.3
    lhs = T.conv2d(Tensor(a * x.data + b * y.data), w).data
    rhs = a * T.conv2d(x, w).data + b * T.conv2d(y, w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)
    w2 = rand_t(rng, 2, 3, 3, 3, dtype=np.float32)
    lhs = T.conv2d(x, Tensor(a * w.data + b * w2.data)).data
    rhs = a * T.conv2d(x, w).data + b * T.conv2d(x, w2).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


# --- dwconv2d ---------------------------------------------------------------

def test_dwconv_delta_identity(rng):
    x = rand_t(rng, 2, 3, 5, 4)
    w = np.zeros((3, 1, 5, 5))
    w[:, 0, 2, 2] = 1.0
    np.testing.assert_array_equal(T.dwconv2d(x, Tensor(w, dtype=np.float64)).data, x.data)


def test_dwconv_equals_grouped_conv(rng):
    x, w, b = rand_t(rng, 1, 2, 3, 3), rand_t(rng, 2, 1, 3, 3), rand_t(rng, 2)
    full = np.zeros((2, 2, 3, 3))
    full[0, 0], full[1, 1] = w.data[0, 0], w.data[1, 0]
    np.testing.assert_allclose(T.dwconv2d(x, w, b).data, conv2d_loops(x.data, full, b.data), atol=1e-12)


def test_dwconv_window_sum():
    x = Tensor(np.ones((1, 1, 5, 5)))
    y = T.dwconv2d(x, Tensor(np.ones((1, 1, 3, 3))))
    assert y.data[0, 0, 2, 2] == 9.0
    assert y.data[0, 0, 0, 0] == 4.0


def test_dwconv_channel_isolation(rng):
    x = rand_t(rng, 1, 4, 6, 6)
    w = rand_t(rng, 4, 1, 3, 3)
    y0 = T.dwconv2d(x, w).data
    x2 = x.data.copy()
    x2[:, 2] += 5.0
    y1 = T.dwconv2d(Tensor(x2, dtype=np.float64), w).data
    changed = np.abs(y1 - y0).reshape(4, -1).max(axis=1) > 0
    assert changed.tolist() == [False, False, True, False]


def test_dwconv_errors(rng):
    with pytest.raises(DimensionError):
        T.dwconv2d(rand_t(rng, 1, 3, 4, 4), rand_t(rng, 2, 1, 3, 3))
    with pytest.raises(DimensionError):
        T.dwconv2d(rand_t(rng, 1, 3, 4, 4), rand_t(rng, 3, 1, 3, 3), rand_t(rng, 2))


def test_dwconv_linearity_f32(rng):
    x, y = rand_t(rng, 1, 3, 7, 7, dtype=np.float32), rand_t(rng, 1, 3, 7, 7, dtype=np.float32)
    w = rand_t(rng, 3, 1, 5, 5, dtype=np.float32)
    lhs = T.dwconv2d(Tensor(2 * x.data - 3 * y.data), w).data
    rhs = 2 * T.dwconv2d(x, w).data - 3 * T.dwconv2d(y, w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


# --- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_channels_gives_zero():
    x = Tensor(np.full((1, 4, 2, 3), 3.7))
    y = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(y.data, 0.0)


def test_layer_norm_single_channel_no_error():
    y = T.layer_norm(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)))
    assert np.all(np.isfinite(y.data))


def test_layer_norm_fixed_point():
    v = np.array([1.0, -1.0, 1.0, -1.0])
    x = Tensor(np.broadcast_to(v[None, :, None, None], (1, 4, 2, 2)).copy())
    y = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(y.data, x.data, atol=1e-5)


def test_layer_norm_matches_two_pass(rng):
    x, g, b = rand_t(rng, 1, 8, 2, 2), rand_t(rng, 8), rand_t(rng, 8)
    np.testing.assert_allclose(T.layer_norm(x, g, b).data, layer_norm_two_pass(x.data, g.data, b.data), atol=1e-6)


def test_layer_norm_statistics(rng):
    x = rand_t(rng, 2, 6, 3, 3, scale=4.0)
    y = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    assert np.abs(y.mean(axis=1)).max() <= 1e-5
    assert np.abs(y.var(axis=1) - 1).max() <= 1e-3


# --- activations and element-wise ------------------------------------------------

def test_gelu_values():
    y = T.gelu(Tensor(np.array([0.0, 1.0, -1.0]), dtype=np.float64)).data
    assert y[0] == 0.0
    expected = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert abs(y[1] - expected) < 1e-12
    assert abs(y[1] - 0.841345) <= 1e-4
    assert abs(y[2] + 1 - expected) < 1e-12


def test_mul_by_zeros(rng):
    a = rand_t(rng, 1, 3, 4, 4)
    np.testing.assert_array_equal(T.mul(a, Tensor(np.zeros(a.shape))).data, 0.0)


def test_per_channel_broadcast_only(rng):
    a = rand_t(rng, 2, 3, 4, 4)
    T.add(a, rand_t(rng, 3))
    T.mul(a, rand_t(rng, 2, 3, 1, 1))
    with pytest.raises(DimensionError):
        T.add(a, rand_t(rng, 2, 3, 4, 1))
    with pytest.raises(DimensionError):
        T.mul(a, rand_t(rng, 4))


def test_scale_and_operators(rng):
    a = rand_t(rng, 1, 2, 2, 2)
    np.testing.assert_array_equal(T.scale(a, 3.0).data, 3.0 * a.data)
    np.testing.assert_array_equal((a * 2.0).data, 2.0 * a.data)
    np.testing.assert_array_equal((a + a).data, 2.0 * a.data)


# --- pixel shuffle --------------------------------------------------------------

def test_pixel_shuffle_definition():
    x = Tensor(np.arange(4.0).reshape(1, 4, 1, 1))
    np.testing.assert_array_equal(T.pixel_shuffle(x, 2).data, [[[[0, 1], [2, 3]]]])


def test_pixel_shuffle_identity_and_roundtrip(rng):
    x = rand_t(rng, 2, 12, 3, 5)
    np.testing.assert_array_equal(T.pixel_shuffle(x, 1).data, x.data)
    y = T.pixel_shuffle(x, 2)
    assert y.shape == (2, 3, 6, 10)
    np.testing.assert_array_equal(T.pixel_unshuffle(y, 2).data, x.data)
    np.testing.assert_array_equal(np.sort(y.data, axis=None), np.sort(x.data, axis=None))


def test_pixel_shuffle_index_map(rng):
    s = 3
    x = rand_t(rng, 1, 2 * s * s, 2, 3)
    y = T.pixel_shuffle(x, s).data
    for c in range(2):
        for h in range(2):
            for w in range(3):
                for dy in range(s):
                    for dx in range(s):
                        assert y[0, c, h * s + dy, w * s + dx] == x.data[0, c * s * s + dy * s + dx, h, w]


def test_pixel_shuffle_indivisible():
    with pytest.raises(ConfigurationError):
        T.pixel_shuffle(Tensor(np.zeros((1, 6, 2, 2))), 2)


# --- tape semantics ---------------------------------------------------------------

def test_non_participating_gets_exact_zero(rng):
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    with Tape() as tape:
        y = T.total(T.gelu(a))
    ga, gb = tape.gradient(y, [a, b])
    assert np.any(ga != 0)
    assert np.all(gb == 0) and gb.shape == b.shape


def test_gradient_accumulates_over_reuse(rng):
    a = Tensor(rng.standard_normal((1, 1, 2, 2)), dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        y = T.total(T.mul(a, a))
    (g,) = tape.gradient(y, [a])
    np.testing.assert_allclose(g, 2 * a.data)


def test_no_tape_means_no_recording(rng):
    a = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    y = T.gelu(a)
    tape = Tape()
    with tape:
        pass
    assert len(tape) == 0 and y.shape == a.shape


def test_debug_finiteness_check():
    T.set_debug(True)
    try:
        with pytest.raises(NonFiniteError):
            T.scale(Tensor(np.array([[[[1e38]]]], dtype=np.float32)), 1e10)
    finally:
        T.set_debug(False)


def test_dtype_switch():
    assert T.default_dtype() == np.float32
    with T.precision(np.float64):
        assert Tensor(np.zeros(2)).dtype == np.float64
    assert Tensor(np.zeros(2)).dtype == np.float32
    with pytest.raises(ConfigurationError):
        T.set_default_dtype(np.int32)


def test_ops_are_pure(rng):
    x, w = rand_t(rng, 1, 3, 6, 6, dtype=np.float32), rand_t(rng, 4, 3, 3, 3, dtype=np.float32)
    a = T.gelu(T.conv2d(x, w)).data
    b = T.gelu(T.conv2d(x, w)).data
    assert a.tobytes() == b.tobytes()


# --- adjoints: property tests over many seeds ----------------------------------

def _unary_ops():
    return {
        "gelu": T.gelu,
        "relu": T.relu,
        "sigmoid": T.sigmoid,
        "pool": T.global_avg_pool,
        "mean": T.mean,
        "shuffle": lambda x: T.pixel_shuffle(x, 2),
        "unshuffle": lambda x: T.pixel_unshuffle(x, 2),
        "slice": lambda x: T.channel_slice(x, 1, 3),
        "roll": lambda x: T.roll(x, (1, -1), (2, 3)),
        "pad": lambda x: T.pad2d(x, 1, 2),
        "crop": lambda x: T.crop2d(x, 3, 2),
        "permute": lambda x: T.permute(x, (0, 2, 3, 1)),
        "reshape": lambda x: T.reshape(x, (2, -1)),
        "scale": lambda x: T.scale(x, -1.7),
        "split_concat": lambda x: T.concat_channels(T.split_channels(x, [1, 3])[::-1]),
    }


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), op=st.sampled_from(sorted(_unary_ops())))
def test_unary_adjoints(seed, op):
    rng = np.random.default_rng(seed)
    x = rand_t(rng, 1, 4, 4, 4)
    if op == "relu":  # keep away from the kink
        x.data[np.abs(x.data) < 1e-3] += 0.01
    rep = grad_check(_unary_ops()[op], [x], seed=seed)
    assert rep.passed, f"{op}: {rep}"


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_conv_adjoints(seed):
    rng = np.random.default_rng(seed)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    inputs = [rand_t(rng, 1, cin, 5, 5), rand_t(rng, cout, cin, k, k), rand_t(rng, cout)]
    rep = grad_check(lambda x, w, b: T.conv2d(x, w, b), inputs, seed=seed)
    assert rep.passed, str(rep)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_dwconv_adjoints(seed):
    rng = np.random.default_rng(seed)
    c, k = int(rng.integers(1, 5)), int(rng.choice([3, 5]))
    inputs = [rand_t(rng, 2, c, 6, 5), rand_t(rng, c, 1, k, k), rand_t(rng, c)]
    rep = grad_check(lambda x, w, b: T.dwconv2d(x, w, b), inputs, seed=seed)
    assert rep.passed, str(rep)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_layer_norm_adjoints(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 7))
    inputs = [rand_t(rng, 2, c, 3, 3), rand_t(rng, c), rand_t(rng, c)]
    rep = grad_check(lambda x, g, b: T.layer_norm(x, g, b), inputs, seed=seed)
    assert rep.passed, str(rep)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), per_channel=st.booleans())
def test_binary_adjoints(seed, per_channel):
    rng = np.random.default_rng(seed)
    a = rand_t(rng, 2, 3, 3, 3)
    b = rand_t(rng, 3) if per_channel else rand_t(rng, 2, 3, 3, 3)
    for op in (T.add, T.mul):
        rep = grad_check(op, [a, b], seed=seed)
        assert rep.passed, f"{op.__name__}: {rep}"
    w = rng.standard_normal(a.shape)
    rep = grad_check(lambda x: T.total(x, w), [a], seed=seed)
    assert rep.passed, str(rep)
