import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcstra import autodiff as ad
from mcstra.autodiff import GradientTape, constant, grad_check, parameter
from mcstra.fourier import make_rng
from mcstra.gradcheck import OP_TOLERANCE, op_cases


@pytest.mark.parametrize("name,f,x", op_cases(0), ids=lambda v: v if isinstance(v, str) else "")
def test_op_gradients(name, f, x):
    assert grad_check(f, x, 1e-6) < OP_TOLERANCE


def test_backward_accumulates_shared_inputs():
    w = parameter(np.array([1.0, 2.0, 3.0]))
    with GradientTape() as tape:
        loss = ad.sum_all(ad.add(ad.mul(w, w), w))
    (g,) = tape.backward(loss, [w])
    np.testing.assert_allclose(g, 2 * w.data + 1)


def test_backward_twice_is_an_error():
    w = parameter(np.ones(2))
    with GradientTape() as tape:
        loss = ad.sum_all(w)
    tape.backward(loss, [w])
    with pytest.raises(RuntimeError):
        tape.backward(loss, [w])


def test_non_scalar_loss_rejected():
    w = parameter(np.ones(3))
    with GradientTape() as tape:
        out = ad.scale(w, 2.0)
    with pytest.raises(ValueError):
        tape.backward(out, [w])


def test_non_finite_loss_rejected():
    w = parameter(np.array([np.inf, 1.0]))
    with GradientTape() as tape:
        loss = ad.sum_all(w)
    with pytest.raises(FloatingPointError):
        tape.backward(loss, [w])


def test_unused_parameter_gets_zero_gradient():
    a, b = parameter(np.ones(2)), parameter(np.ones(3))
    with GradientTape() as tape:
        loss = ad.sum_all(a)
    ga, gb = tape.backward(loss, [a, b])
    np.testing.assert_array_equal(gb, 0)
    np.testing.assert_array_equal(ga, 1)


def test_no_recording_outside_tape():
    w = parameter(np.ones(2))
    out = ad.mul(w, w)
    with GradientTape() as tape:
        pass
    assert len(tape) == 0
    assert out.shape == (2,)


def test_default_dtype_is_float32_and_switchable():
    assert parameter(np.ones(2)).dtype == np.float32
    with ad.default_dtype(np.float64):
        assert parameter(np.ones(2)).dtype == np.float64
    assert ad.get_default_dtype() == np.float32


def test_gradients_keep_parameter_dtype():
    w = parameter(np.ones((2, 2)))
    x = constant(np.ones((2, 2)), dtype=np.float64)
    with GradientTape() as tape:
        loss = ad.sum_all(ad.matmul(x, w))
    (g,) = tape.backward(loss, [w])
    assert w.grad.dtype == np.float32
    assert g.dtype == np.float64  # returned copies are for f64 accumulation


@given(seed=st.integers(0, 2**32), n=st.integers(2, 6))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_sum_to_one(seed, n):
    x = constant(make_rng(seed).normal(size=(3, n)) * 10, dtype=np.float64)
    np.testing.assert_allclose(ad.softmax(x, axis=-1).data.sum(-1), 1.0, atol=1e-12)


def test_l1_subgradient_is_zero_at_ties():
    a = parameter(np.array([1.0, 2.0, 3.0]), dtype=np.float64)
    with GradientTape() as tape:
        loss = ad.l1_loss(a, constant(np.array([1.0, 0.0, 5.0]), dtype=np.float64))
    (g,) = tape.backward(loss, [a])
    np.testing.assert_allclose(g, [0.0, 1 / 3, -1 / 3])


def test_magnitude_is_finite_at_zero():
    z = parameter(np.zeros((2, 3)), dtype=np.float64)
    with GradientTape() as tape:
        loss = ad.sum_all(ad.two_channel_magnitude(z, axis=0))
    (g,) = tape.backward(loss, [z])
    assert np.all(np.isfinite(g))


def test_take_with_inverse_is_exact():
    x = constant(np.arange(12.0).reshape(1, 12, 1))
    perm = make_rng(0).permutation(12)
    y = ad.gather_windows(x, perm, axis=1)
    back = ad.scatter_windows(y, perm, axis=1)
    np.testing.assert_array_equal(back.data, x.data)


def test_grad_check_detects_a_wrong_vjp():
    def bad(t):
        return ad.sum_all(ad.custom_op([t], t.data * 2, lambda g: (g * 3,)))

    assert grad_check(bad, np.ones(3)) > 0.1
