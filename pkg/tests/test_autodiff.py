import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphsdf import autodiff as ad
from morphsdf.autodiff import Dual, Tape, Tensor

from conftest import grad_check


def test_add_componentwise():
    np.testing.assert_array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])


def test_matmul_identity(rng):
    v = rng.normal(size=(1, 3)).astype(np.float32)
    np.testing.assert_array_equal(ad.matmul(v, np.eye(3, dtype=np.float32)).data, v)


def test_sum_of_squares():
    assert float(ad.sum_(ad.square(Tensor([3.0, 4.0]))).data) == 25.0


def test_shape_mismatch_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(np.zeros(2), np.zeros(3))
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_backward_sum_of_squares():
    tape = Tape()
    w = tape.leaf(np.array([1.0, 2.0]))
    g = tape.backward(ad.sum_(ad.square(w)))
    np.testing.assert_allclose(g.of(w), [2.0, 4.0])


def test_constant_loss_gives_zero_grads():
    tape = Tape()
    w = tape.leaf(np.ones(4))
    g = tape.backward(Tensor(np.float32(3.0)))
    np.testing.assert_array_equal(g.of(w), np.zeros(4))


def test_untouched_leaf_gets_zero():
    tape = Tape()
    a = tape.leaf(np.ones(2))
    b = tape.leaf(np.ones(3))
    g = tape.backward(ad.sum_(a))
    np.testing.assert_array_equal(g.of(b), np.zeros(3))


def test_backward_rejects_non_scalar():
    tape = Tape()
    w = tape.leaf(np.ones(3))
    with pytest.raises(ad.ShapeError):
        tape.backward(ad.square(w))


def test_backward_twice_is_an_error():
    tape = Tape()
    w = tape.leaf(np.ones(3))
    loss = ad.sum_(w)
    tape.backward(loss)
    with pytest.raises(ad.TapeError):
        tape.backward(loss)
    tape.reset()
    w = tape.leaf(np.ones(3))
    np.testing.assert_array_equal(tape.backward(ad.sum_(w)).of(w), np.ones(3))


def test_mixing_tapes_rejected():
    a = Tape().leaf(np.ones(2))
    b = Tape().leaf(np.ones(2))
    with pytest.raises(ad.TapeError):
        ad.add(a, b)


def test_parents_precede_children():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    y = ad.sin(ad.mul(x, 2.0))
    ad.sum_(ad.add(y, x))
    for i, parents in enumerate(tape._parents):
        assert all(p is None or p < i for p in parents)


UNARY = {
    "neg": ad.neg, "sin": ad.sin, "cos": ad.cos, "exp": ad.exp, "square": ad.square,
    "sigmoid": ad.sigmoid, "softplus": lambda t: ad.softplus(t, 10.0),
    "log": lambda t: ad.log(ad.add(t, 2.0)), "sqrt": lambda t: ad.sqrt(ad.add(t, 2.0)),
    "abs": ad.abs_, "relu": ad.relu,
    "sum0": lambda t: ad.sum_(t, axis=0), "mean1": lambda t: ad.mean(t, axis=1),
    "mean_both": lambda t: ad.mean(t, axis=(0, 1)), "norm": lambda t: ad.norm(t, axis=-1),
    "transpose": ad.transpose, "reshape": lambda t: ad.reshape(t, (4, 3)),
    "slice": lambda t: t[1:, ::2], "fancy": lambda t: ad.getitem(t, np.array([0, 2, 2])),
    "broadcast": lambda t: ad.broadcast_to(ad.reshape(t, (1, 3, 4)), (2, 3, 4)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_vjp_matches_finite_differences(name, rng):
    x = rng.uniform(-1, 1, (3, 4))
    if name in ("abs", "relu"):
        x = np.where(np.abs(x) < 0.05, 0.3, x)  # stay off the kink
    w = rng.normal(size=np.shape(UNARY[name](Tensor(x)).data))
    err = grad_check(lambda v: ad.sum_(ad.mul(UNARY[name](v["x"]), w)), {"x": x}, ["x"])
    assert err < 1e-4


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 0.5)),
    "maximum": ad.maximum,
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "stack": lambda a, b: ad.stack([a, b], axis=1),
    "where": lambda a, b: ad.where(np.arange(12).reshape(3, 4) % 3 == 0, a, b),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_vjp_matches_finite_differences(name, rng):
    a = rng.uniform(-1, 1, (3, 4))
    b = rng.uniform(-1, 1, (3, 4))
    if name == "maximum":
        b = a + np.where(rng.random((3, 4)) < 0.5, 0.2, -0.2)
    w = rng.normal(size=np.shape(BINARY[name](Tensor(a), Tensor(b)).data))
    err = grad_check(lambda v: ad.sum_(ad.mul(BINARY[name](v["a"], v["b"]), w)),
                     {"a": a, "b": b}, ["a", "b"])
    assert err < 1e-4


def test_broadcast_add_bias(rng):
    x = rng.uniform(-1, 1, (5, 3))
    b = rng.uniform(-1, 1, 3)
    err = grad_check(lambda v: ad.sum_(ad.square(ad.add(v["x"], v["b"]))), {"x": x, "b": b}, ["x", "b"])
    assert err < 1e-4


def test_scatter_gradient(rng):
    base = np.zeros((5, 3))
    vals = rng.uniform(-1, 1, (2, 3))
    err = grad_check(lambda v: ad.sum_(ad.square(ad.scatter(base, np.array([1, 3]), v["v"]))),
                     {"v": vals}, ["v"])
    assert err < 1e-4


def _two_layer(v, x):
    h = ad.softplus(ad.add(ad.matmul(x, v["W0"]), v["b0"]), 10.0)
    return ad.add(ad.matmul(h, v["W1"]), v["b1"])


def _net_params(rng, d_in=3, width=6):
    return {"W0": rng.normal(0, 0.7, (d_in, width)), "b0": rng.normal(0, 0.1, width),
            "W1": rng.normal(0, 0.7, (width, 1)), "b1": rng.normal(0, 0.1, 1)}


def test_two_layer_net_matches_finite_differences(rng):
    params = _net_params(rng)
    x = rng.uniform(-1, 1, (7, 3))
    err = grad_check(lambda v: ad.mean(ad.square(_two_layer(v, Tensor(x)))), params, list(params), h=1e-3)
    assert err < 1e-4


def _dual_two_layer(v, d):
    h = d.matmul(v["W0"]).add_const(v["b0"]).softplus(10.0)
    return h.matmul(v["W1"]).add_const(v["b1"])


def test_input_gradient_of_norm():
    def fn(d):
        # sqrt(x.x) via tangents: grad = x / |x|
        sq = ad.sum_(ad.square(d.primal), axis=-1, keepdims=True)
        r = ad.sqrt(sq)
        return Dual(r, ad.div(ad.sum_(ad.mul(d.tangent, d.primal), axis=-1, keepdims=True), r))

    _, g = ad.input_gradient(fn, np.array([[0.0, 0.0, 2.0]]))
    np.testing.assert_allclose(g.data, [[0.0, 0.0, 1.0]], atol=1e-7)


def test_input_gradient_of_linear_map(rng):
    a = rng.normal(size=(3, 1)).astype(np.float32)
    x = rng.normal(size=(5, 3)).astype(np.float32)
    _, g = ad.input_gradient(lambda d: d.matmul(Tensor(a)), x)
    np.testing.assert_allclose(g.data, np.tile(a.T, (5, 1)), rtol=1e-6)


def test_input_gradient_rejects_vector_field(rng):
    with pytest.raises(ad.ShapeError):
        ad.input_gradient(lambda d: d.matmul(Tensor(np.ones((3, 2)))), np.zeros((2, 3)))


def test_input_gradient_matches_finite_differences(rng):
    params = _net_params(rng)
    x = rng.uniform(-1, 1, (6, 3))
    view = {k: Tensor(v) for k, v in params.items()}
    _, g = ad.input_gradient(lambda d: _dual_two_layer(view, d), x)
    h = 1e-6
    numeric = np.zeros_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        up = _two_layer(view, Tensor(x + e)).data[:, 0]
        down = _two_layer(view, Tensor(x - e)).data[:, 0]
        numeric[:, k] = (up - down) / (2 * h)
    assert np.abs(g.data - numeric).max() / np.abs(numeric).max() < 1e-3


def test_eikonal_parameter_gradient_double_finite_difference(rng):
    """d/dtheta of mean (|grad_x f| - 1)^2 against differences over theta."""
    params = _net_params(rng)
    x = rng.uniform(-1, 1, (6, 3))

    def loss(v):
        _, g = ad.input_gradient(lambda d: _dual_two_layer(v, d), x)
        return ad.mean(ad.square(ad.sub(ad.norm(g, axis=-1), 1.0)))

    assert grad_check(loss, params, list(params)) < 1e-3


@settings(max_examples=25, deadline=None)
@given(alpha=st.floats(-5, 5, allow_nan=False))
def test_tangent_is_linear_in_seed(alpha):
    rng = np.random.default_rng(3)
    view = {k: Tensor(v) for k, v in _net_params(rng).items()}
    x = Tensor(rng.uniform(-1, 1, (4, 3)))
    seed = rng.normal(size=(1, 4, 3))
    t1 = _dual_two_layer(view, Dual(x, Tensor(seed))).tangent.data
    t2 = _dual_two_layer(view, Dual(x, Tensor(alpha * seed))).tangent.data
    np.testing.assert_allclose(t2, alpha * t1, rtol=1e-9, atol=1e-12)


def test_batch_gradient_is_sum_of_sample_gradients(rng):
    params = _net_params(rng)
    xs = [rng.uniform(-1, 1, (1, 3)) for _ in range(4)]

    def grads(points):
        tape = Tape()
        view = {k: tape.leaf(v) for k, v in params.items()}
        total = None
        for p in points:
            term = ad.sum_(ad.square(_two_layer(view, Tensor(p))))
            total = term if total is None else ad.add(total, term)
        g = tape.backward(total)
        return {k: g.of(view[k]) for k in params}

    together = grads(xs)
    separate = [grads([p]) for p in xs]
    for k in params:
        np.testing.assert_allclose(together[k], sum(s[k] for s in separate), rtol=1e-10, atol=1e-12)


def test_float32_default_and_float64_reduction():
    x = Tensor(np.full(10**6, 0.1, np.float32))
    assert x.dtype == np.float32
    s = ad.sum_(x).data
    assert s.dtype == np.float32
    assert abs(float(s) - 1e5) < 1.0  # pairwise float32 accumulation would drift further


def test_softplus_matches_reference(rng):
    x = rng.uniform(-0.2, 0.2, 1000)
    np.testing.assert_allclose(ad.softplus(Tensor(x), 100.0).data, np.logaddexp(0, 100 * x) / 100, rtol=1e-12)
