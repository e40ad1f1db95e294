import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptable_adapters import autodiff as ad
from adaptable_adapters.autodiff import BackwardError, DomainError, ShapeError, Tensor
from adaptable_adapters.optim import Adam, AdamState, adam_step


@pytest.fixture(autouse=True)
def clean_tape():
    ad.get_tape().clear()
    yield
    ad.get_tape().clear()


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.values, [[1, 2], [3, 4]])


def test_abs_value_and_gradient():
    x = Tensor([-2.5], requires_grad=True)
    y = ad.absolute(x)
    assert y.values[0] == 2.5
    ad.backward(ad.sum(y))
    assert x.grad[0] == -1.0


def test_abs_gradient_at_zero_is_zero():
    x = Tensor([0.0], requires_grad=True)
    ad.backward(ad.sum(ad.absolute(x)))
    assert x.grad[0] == 0.0


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).values, [0.5, 0.5])


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    ad.backward(ad.sum(x * x))
    assert x.grad[0] == 6.0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(BackwardError):
        ad.backward(x * 2.0)


def test_double_backward_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum(x * x)
    ad.backward(loss)
    assert len(ad.get_tape()) == 0
    with pytest.raises(BackwardError):
        ad.backward(loss)


def test_each_node_replayed_once():
    calls = []
    x = Tensor([1.0, 2.0], requires_grad=True)

    def counted(t):
        return ad.get_tape().record("count", Tensor(t.values * 1.0), (t,),
                                    lambda g: (calls.append(1) or g,))

    a = counted(x)
    loss = ad.sum(ad.add(ad.mul(a, a), a))  # a used three times downstream
    ad.backward(loss)
    assert len(calls) == 1
    np.testing.assert_allclose(x.grad, 2 * x.values + 1)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        ad.exp(x)
    assert len(ad.get_tape()) == 0


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    outs = [ad.layer_norm(ad.softmax(Tensor(x))).values for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


def test_gradient_check_square():
    x = Tensor(np.random.default_rng(1).normal(size=8))
    rep = ad.gradient_check(lambda: ad.sum(x * x), x, eps=1e-5, tol=1e-5)
    assert rep.passed, rep


def test_gradient_check_rejects_bad_eps():
    x = Tensor([1.0])
    with pytest.raises(ValueError):
        ad.gradient_check(lambda: ad.sum(x), x, eps=1e-2)


def test_gradient_check_flags_wrong_gradient():
    x = Tensor([1.0, 2.0])

    def wrong():
        return ad.get_tape().record("bad", Tensor(np.asarray((x.values ** 2).sum())), (x,),
                                    lambda g: (g * x.values,))  # missing factor 2

    rep = ad.gradient_check(wrong, x, eps=1e-5, tol=1e-3)
    assert not rep.passed


def test_gradient_check_non_finite():
    x = Tensor([1.0])

    def f():
        return ad.get_tape().record("nan", Tensor(np.asarray(x.values.sum())), (x,),
                                    lambda g: (np.array([np.nan]),))

    rep = ad.gradient_check(f, x, eps=1e-5, tol=1e-3)
    assert not rep.passed and rep.worst_index == (0, 0)


# every primitive against central differences

def _rand(rng, *shape):
    return rng.normal(size=shape)


def _weighted(out, rng):
    # a random linear functional keeps every output coordinate in play
    w = Tensor(rng.normal(size=out.shape))
    return ad.sum(ad.mul(out, w))


PRIMS = {
    "add": (lambda t: ad.add(t[0], t[1]), [(3, 4), (4,)]),
    "sub": (lambda t: ad.sub(t[0], t[1]), [(3, 4), (3, 4)]),
    "mul": (lambda t: ad.mul(t[0], t[1]), [(2, 3, 4), (4,)]),
    "scale": (lambda t: ad.scale(t[0], -1.7), [(5,)]),
    "power3": (lambda t: ad.power(t[0], 3), [(5,)]),
    "power0": (lambda t: ad.power(t[0], 0), [(5,)]),
    "abs": (lambda t: ad.absolute(t[0]), [(6,)]),
    "exp": (lambda t: ad.exp(t[0]), [(6,)]),
    "log": (lambda t: ad.log(ad.add(ad.mul(t[0], t[0]), Tensor(0.5))), [(6,)]),
    "relu": (lambda t: ad.relu(t[0]), [(6,)]),
    "matmul": (lambda t: ad.matmul(t[0], t[1]), [(2, 3, 4), (4, 5)]),
    "bmm": (lambda t: ad.matmul(t[0], t[1]), [(2, 3, 4), (2, 4, 2)]),
    "linear": (lambda t: ad.linear(t[0], t[1], t[2]), [(2, 3, 4), (4, 5), (5,)]),
    "softmax": (lambda t: ad.softmax(t[0]), [(3, 4)]),
    "masked_softmax": (lambda t: ad.masked_softmax(t[0], np.array([True, False, True, True])), [(3, 4)]),
    "layer_norm": (lambda t: ad.layer_norm(t[0], t[1], t[2]), [(3, 6), (6,), (6,)]),
    "mean_pool": (lambda t: ad.mean_pool(t[0], np.array([[1, 1, 0], [1, 0, 0]], bool)), [(2, 3, 4)]),
    "concat": (lambda t: ad.concat([t[0], t[1]], axis=-1), [(2, 3), (2, 2)]),
    "reshape_transpose": (lambda t: ad.transpose(ad.reshape(t[0], (2, 3, 2)), 0, 2), [(3, 4)]),
    "mean": (lambda t: ad.mean(t[0]), [(3, 4)]),
    "cross_entropy": (lambda t: ad.softmax_cross_entropy(t[0], np.array([0, 2, 1])), [(3, 3)]),
}


def _kink_free(name, tensors):
    if name in ("abs", "relu"):
        for t in tensors:
            t.values[np.abs(t.values) < 1e-3] += 0.1


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients_100_draws(name):
    fn, shapes = PRIMS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(100):
        ts = [Tensor(_rand(rng, *s)) for s in shapes]
        _kink_free(name, ts)
        w = Tensor(rng.normal(size=fn(ts).shape))
        rep = ad.gradient_check(lambda: ad.sum(ad.mul(fn(ts), w)), ts, eps=1e-6, tol=1e-3)
        assert rep.passed, (name, rep)


def test_embedding_gradient_scatter_adds():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = ad.embedding(table, np.array([[1, 1], [3, 0]]))
    ad.backward(ad.sum(out))
    np.testing.assert_array_equal(table.grad[:, 0], [1, 2, 0, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_softmax_normalises(xs):
    y = ad.softmax(Tensor(xs)).values
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.all(y >= 0)


# Adam

def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    # m_hat = 1, v_hat = 1 after bias correction -> step = lr / (1 + eps)
    p = np.array([0.0])
    st_ = AdamState()
    adam_step([p], [np.array([1.0])], st_, lr=0.1, eps=1e-8)
    assert st_.step == 1
    assert p[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_symmetric_params_stay_equal():
    a = Tensor([0.3], requires_grad=True)
    b = Tensor([0.3], requires_grad=True)
    opt = Adam([a, b], lr=0.05)
    for k in range(25):
        g = np.array([np.sin(k)])
        a.grad, b.grad = g.copy(), g.copy()
        opt.step()
    assert a.values.tobytes() == b.values.tobytes()
