import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptable_adapters import autodiff as ad
from adaptable_adapters.autodiff import DomainError, Tensor
from adaptable_adapters.optim import Adam
from adaptable_adapters.rational import (DEFAULT_ORDER, RationalCoefficients, denominator, fit_to_function,
                                         init_constant, init_identity, init_named, rational_backward,
                                         rational_forward, rational_values)

# First run of the ReLU fit oracle on [-3, 3], order (5, 4); kept as a regression bound.
RELU_FIT_BOUND = 0.042840504711269906


@pytest.fixture(autouse=True)
def clean_tape():
    ad.get_tape().clear()
    yield
    ad.get_tape().clear()


def test_constant_one_is_one_everywhere():
    c = RationalCoefficients([1, 0, 0, 0, 0, 0], [0, 0, 0, 0])
    xs = np.linspace(-5, 5, 101)
    np.testing.assert_array_equal(rational_forward(Tensor(xs), c).values, np.ones_like(xs))


def test_identity_polynomial():
    c = RationalCoefficients([0, 1, 0, 0, 0, 0], [0, 0, 0, 0])
    np.testing.assert_array_equal(rational_forward(Tensor([-2.0, 0.0, 3.0]), c).values, [-2, 0, 3])


def test_matches_closed_form():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=6), rng.normal(size=4)
    x = rng.uniform(-4, 4, 50)
    num = sum(a[j] * x ** j for j in range(6))
    s = sum(b[k - 1] * x ** k for k in range(1, 5))
    np.testing.assert_allclose(rational_values(x, a, b), num / (1 + np.abs(s)), rtol=1e-12)


def test_non_finite_input_names_index():
    with pytest.raises(DomainError, match=r"\(1,\)"):
        rational_forward(Tensor([0.0, np.nan, 1.0]), init_constant(1.0))


def test_constant_one_gradients():
    c = init_constant(1.0)
    x = Tensor([-1.5, 0.3, 2.0], requires_grad=True)
    ad.backward(ad.sum(rational_forward(x, c)))
    np.testing.assert_array_equal(x.grad, 0.0)
    assert c.a.grad[0] == 3.0  # one per element
    np.testing.assert_allclose(c.a.grad, [np.sum(x.values ** j) for j in range(6)], rtol=1e-14)
    np.testing.assert_array_equal(c.b.grad, 0.0)


def test_identity_gradients_at_two():
    gx, ga, gb = rational_backward(np.array([2.0]), init_identity().a.values, np.zeros(4), np.ones(1))
    assert gx[0] == 1.0
    assert ga[1] == 2.0
    np.testing.assert_array_equal(gb, 0.0)


def test_init_constant_zero():
    np.testing.assert_array_equal(rational_values(np.linspace(-5, 5, 11), *_ab(init_constant(0.0))), 0.0)


def _ab(c):
    return c.a.values, c.b.values


def test_constant_minus_two_step_is_stationary():
    c = init_constant(-2.0)
    before = [p.values.copy() for p in c.parameters()]
    opt = Adam(c.parameters(), lr=1e-2)
    x = Tensor(np.linspace(-3, 3, 13))
    r = rational_forward(x, c)
    diff = r - Tensor(-2.0)
    ad.backward(ad.sum(diff * diff))
    opt.step()
    for p, b in zip(c.parameters(), before):
        np.testing.assert_array_equal(p.values, b)


def test_finite_difference_1000_draws():
    """Analytic gradients for x, a and b against central differences at 1e-4."""
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    draws = 0
    while draws < 1000:
        a = rng.normal(0, 0.7, 6)
        b = rng.normal(0, 0.7, 4)
        x = rng.uniform(-2.5, 2.5, 4)
        # keep away from roots of Q, where |Q| has a kink
        s = x * np.polyval(b[::-1], x)
        if np.any(np.abs(s) < 1e-3):
            continue
        xt = Tensor(x)
        c = RationalCoefficients(a, b, requires_grad=False)
        w = rng.normal(size=4)
        rep = ad.gradient_check(lambda: ad.sum(ad.mul(rational_forward(xt, c), Tensor(w))),
                                [xt, c.a, c.b], eps=1e-6, tol=1e-4)
        assert rep.passed, rep
        draws += 1
    assert time.perf_counter() - t0 < 30


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_denominator_at_least_one(b):
    xs = np.linspace(-100, 100, 20001)
    assert np.all(denominator(xs, b) >= 1.0)


def test_fit_constant_and_identity_exact():
    one = fit_to_function(lambda x: np.ones_like(x))
    assert one.max_abs_error <= 1e-6 and one.converged
    np.testing.assert_allclose(one.coefficients.a.values, init_constant(1.0).a.values, atol=1e-6)
    np.testing.assert_allclose(one.coefficients.b.values, 0.0, atol=1e-6)
    ident = fit_to_function(lambda x: x)
    assert ident.max_abs_error <= 1e-6


def test_fit_relu_within_tolerance_and_regression_bound():
    fit = fit_to_function(lambda x: np.maximum(x, 0.0))
    assert fit.converged
    assert fit.max_abs_error <= 0.1
    assert fit.max_abs_error <= RELU_FIT_BOUND + 1e-9
    grid = np.linspace(-3, 3, 61)
    err = np.abs(rational_values(grid, *_ab(fit.coefficients)) - np.maximum(grid, 0))
    assert err.max() <= 0.1


def test_fit_rejects_short_grid():
    with pytest.raises(ValueError):
        fit_to_function(np.tanh, grid=np.linspace(-3, 3, 50))
    with pytest.raises(ValueError):
        fit_to_function(np.tanh, grid=np.linspace(-1, 1, 500))


def test_fit_flags_unreachable_tolerance(caplog):
    fit = fit_to_function(lambda x: np.sign(np.sin(4 * x)), tol=1e-6, iters=200)
    assert not fit.converged
    assert "tolerance" in caplog.text


def test_ten_parameters_default():
    assert DEFAULT_ORDER == (5, 4)
    assert init_named("one").num_parameters == 10
    assert init_named("relu").num_parameters == 10


def test_serialization_round_trip():
    c = RationalCoefficients(np.arange(6.0), -np.arange(4.0))
    d = c.to_dict()
    assert set(d) == {"a", "b"}
    c2 = RationalCoefficients.from_dict(d)
    assert c2.a.values.tobytes() == c.a.values.tobytes()
    assert c2.order == (5, 4)


def test_rejects_non_finite_coefficients():
    with pytest.raises(ValueError):
        RationalCoefficients([1, np.inf], [0])
