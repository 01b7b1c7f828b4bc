import numpy as np
import pytest

from matsr import tensor as T
from matsr.errors import ValidationError
from matsr.gradcheck import grad_check
from matsr.tensor import Tensor, result

from conftest import rand_t


def test_linear_op_machine_level(rng):
    rep = grad_check(lambda x: T.scale(x, 3.0), [rand_t(rng, 1, 2, 4, 4)])
    assert rep.passed and rep.max_rel_error <= 1e-10


def test_conv_example(rng):
    rep = grad_check(lambda x, w: T.conv2d(x, w), [rand_t(rng, 1, 2, 5, 5), rand_t(rng, 3, 2, 3, 3)])
    assert rep.passed and rep.n_coords >= 64


def test_detects_wrong_adjoint(rng):
    def bad_square(x):
        return result(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    rep = grad_check(bad_square, [rand_t(rng, 1, 1, 4, 4)])
    assert not rep.passed and rep.max_rel_error > 0.3


def test_detects_missing_term(rng):
    def leaky(a, b):
        return result(a.data * b.data, (a, b), lambda g: (g * b.data, np.zeros_like(g)))

    rep = grad_check(leaky, [rand_t(rng, 1, 1, 3, 3), rand_t(rng, 1, 1, 3, 3)])
    assert not rep.passed
    assert rep.worst[0] == 1


def test_nonfinite_forward_is_input_error():
    with pytest.raises(ValidationError):
        grad_check(lambda x: T.scale(x, np.inf), [Tensor(np.ones((1, 1, 2, 2)))])


def test_samples_at_least_64_coordinates(rng):
    rep = grad_check(T.gelu, [rand_t(rng, 1, 4, 8, 8)], n_coords=64)
    assert rep.n_coords == 64
    small = grad_check(T.gelu, [rand_t(rng, 1, 1, 2, 2)])
    assert small.n_coords == 4


def test_inputs_not_mutated(rng):
    x = rand_t(rng, 1, 2, 3, 3, dtype=np.float32)
    before = x.data.copy()
    grad_check(T.sigmoid, [x])
    assert x.data.tobytes() == before.tobytes() and x.dtype == np.float32


def test_report_string(rng):
    rep = grad_check(T.gelu, [rand_t(rng, 1, 1, 3, 3)])
    assert str(rep).startswith("gradcheck ok")
