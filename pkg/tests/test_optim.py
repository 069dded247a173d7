import math

import numpy as np
import pytest

from morphsdf.optim import Adam, cosine_lr


def _reference_adam(x, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_quadratic_converges_and_matches_scalar_reference():
    opt = Adam()
    p = {"x": np.zeros(1, np.float32)}
    for _ in range(200):
        opt.step(p, {"x": 2 * (p["x"] - 3)}, {"x": 0.1})
    assert abs(float(p["x"][0]) - 3) < 1e-2
    ref = _reference_adam(0.0, lambda x: 2 * (x - 3), 0.1, 200)
    assert abs(float(p["x"][0]) - ref) < 1e-4


def test_zero_grads_leave_params_and_decay_moments():
    opt = Adam()
    p = {"w": np.ones(3, np.float32)}
    opt.step(p, {"w": np.full(3, 0.5, np.float32)}, {"w": 0.01})
    before = p["w"].copy()
    m, v = opt.m["w"].copy(), opt.v["w"].copy()
    opt.step(p, {"w": np.zeros(3, np.float32)}, {"w": 0.01})
    np.testing.assert_allclose(opt.m["w"], 0.9 * m, rtol=1e-6)
    np.testing.assert_allclose(opt.v["w"], 0.999 * v, rtol=1e-6)
    # with zero gradient the update is lr * mhat / (sqrt(vhat) + eps), driven by the decayed moment
    assert np.all(p["w"] <= before)
    opt2 = Adam()
    q = {"w": np.ones(3, np.float32)}
    opt2.step(q, {"w": np.zeros(3, np.float32)}, {"w": 0.01})
    np.testing.assert_array_equal(q["w"], 1)


def test_identical_grads_update_identically():
    opt = Adam()
    p = {"a": np.array([0.3, -1.0], np.float32), "b": np.array([0.3, -1.0], np.float32)}
    rng = np.random.default_rng(0)
    for _ in range(5):
        g = rng.normal(size=2).astype(np.float32)
        opt.step(p, {"a": g, "b": g.copy()}, {"a": 0.05, "b": 0.05})
    np.testing.assert_array_equal(p["a"], p["b"])


def test_non_finite_gradient_skips_step(caplog):
    opt = Adam()
    p = {"a": np.ones(2, np.float32), "b": np.ones(2, np.float32)}
    ok = opt.step(p, {"a": np.ones(2, np.float32), "b": np.array([np.inf, 0], np.float32)}, {"a": 1, "b": 1})
    assert not ok and opt.skipped == 1
    np.testing.assert_array_equal(p["a"], 1)
    assert "non-finite" in caplog.text


def test_sparse_rows_touch_only_selected_rows():
    opt = Adam()
    table = np.arange(12, dtype=np.float32).reshape(4, 3)
    p = {"t": table}
    g = np.ones((4, 3), np.float32)
    opt.step(p, {"t": g}, {"t": 0.1}, rows={"t": np.array([1, 3, 3])})
    np.testing.assert_array_equal(p["t"][[0, 2]], np.arange(12, dtype=np.float32).reshape(4, 3)[[0, 2]])
    np.testing.assert_array_equal(opt.t["t"], [0, 1, 0, 1])
    np.testing.assert_array_equal(opt.m["t"][0], 0)
    # a row seen for the first time later still gets a full bias-corrected first step
    opt.step(p, {"t": g}, {"t": 0.1}, rows={"t": np.array([0])})
    np.testing.assert_allclose(p["t"][0], np.array([0, 1, 2]) - 0.1, atol=1e-6)


def test_state_round_trip():
    opt = Adam()
    p = {"w": np.ones((2, 2), np.float32), "z": np.zeros((3, 2), np.float32)}
    opt.step(p, {"w": np.ones((2, 2), np.float32), "z": np.ones((3, 2), np.float32)}, {"w": 0.1, "z": 0.1},
             rows={"z": np.array([2])})
    back = Adam.from_arrays(opt.state_arrays())
    for name in ("w", "z"):
        np.testing.assert_array_equal(back.m[name], opt.m[name])
        np.testing.assert_array_equal(back.v[name], opt.v[name])
        np.testing.assert_array_equal(back.t[name], opt.t[name])


def test_cosine_lr():
    assert cosine_lr(1.0, 0, 100) == 1.0
    assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5)
    assert cosine_lr(1.0, 100, 100) == pytest.approx(0.0)
    assert cosine_lr(1.0, 300, 100, floor=0.1) == pytest.approx(0.1)
