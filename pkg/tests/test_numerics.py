import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from croma import numerics as nx
from croma.numerics import Tensor, check_gradients
from croma.numerics import container
from croma.numerics.tensor import _make
from croma.numerics.optim import LrSchedule, OptimizerState, adamw_step, lr_at


def leaf(arr, name="x"):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name)


def grads_ok(f, params, tol=1e-6):
    rep = check_gradients(f, params, h=1e-6, tol=tol)
    assert rep.passed, rep.max_rel_err


# -- forward values ---------------------------------------------------------

def test_softmax_matches_closed_form():
    out = nx.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data
    denom = math.exp(1) + math.exp(2) + math.exp(3)
    oracle = [math.exp(v) / denom for v in (1, 2, 3)]
    np.testing.assert_allclose(out, oracle, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_log_softmax_stable_for_large_logits():
    out = nx.log_softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert out[0] == 0.0
    assert out[1] == -1000.0


def test_gelu_exact_erf_form():
    x = np.array([-2.0, -0.5, 0.0, 0.7, 3.0])
    oracle = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(nx.gelu(Tensor(x)).data, oracle, atol=1e-15)


def test_softplus_extremes():
    out = nx.softplus(Tensor([-800.0, 0.0, 800.0])).data
    assert out[0] == 0.0 and out[2] == 800.0
    assert out[1] == pytest.approx(math.log(2.0), abs=1e-15)


def test_layernorm_zero_mean_unit_var(rng):
    x = rng.normal(size=(3, 8)) * 5 + 2
    y = nx.layernorm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-5)


def test_l2_normalize_unit_rows(rng):
    y = nx.l2_normalize(Tensor(rng.normal(size=(4, 5)))).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1, atol=1e-14)


def test_scatter_then_take_roundtrip(rng):
    x = rng.normal(size=(2, 3, 4))
    idx = np.array([[0, 2, 5], [1, 3, 4]])
    full = nx.scatter_rows(Tensor(x), idx, 6).data
    assert np.all(full[0, [1, 3, 4]] == 0)
    np.testing.assert_array_equal(nx.take_rows(Tensor(full), idx).data, x)


# -- gradients, one op at a time --------------------------------------------

UNARY = {
    "exp": nx.exp,
    "tanh": nx.tanh,
    "gelu": nx.gelu,
    "softplus": nx.softplus,
    "sqrt_abs": lambda t: nx.sqrt(nx.add(nx.mul(t, t), 1.0)),
    "log_pos": lambda t: nx.log(nx.add(nx.mul(t, t), 0.5)),
    "softmax": nx.softmax_lastdim,
    "log_softmax": nx.log_softmax_lastdim,
    "l2norm": nx.l2_normalize,
    "pow3": lambda t: nx.power(t, 3.0),
    "clamp": lambda t: nx.clamp(t, -0.5, 0.5),
    "relu": nx.relu,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, rng):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.05] += 0.2  # keep relu/clamp kinks away from the stencil
    x[np.abs(np.abs(x) - 0.5) < 0.05] += 0.2
    w = rng.normal(size=(3, 4))
    params = {"x": leaf(x)}
    grads_ok(lambda p: nx.tsum(nx.mul(UNARY[name](p["x"]), w)), params)


def test_binary_broadcast_gradients(rng):
    params = {"a": leaf(rng.normal(size=(2, 3, 4)), "a"), "b": leaf(rng.normal(size=(4,)) + 3.0, "b")}
    w = rng.normal(size=(2, 3, 4))

    def f(p):
        s = nx.add(nx.mul(p["a"], p["b"]), nx.sub(p["a"], p["b"]))
        return nx.tsum(nx.mul(nx.div(s, p["b"]), w))

    grads_ok(f, params)


def test_matmul_linear_layernorm_gradients(rng):
    params = {
        "x": leaf(rng.normal(size=(2, 5, 6)), "x"),
        "w": leaf(rng.normal(size=(6, 4)), "w"),
        "b": leaf(rng.normal(size=(4,)), "b"),
        "g": leaf(rng.normal(size=(4,)), "g"),
        "h": leaf(rng.normal(size=(4,)), "h"),
    }
    w = rng.normal(size=(2, 5, 4))

    def f(p):
        y = nx.layernorm(nx.linear(p["x"], p["w"], p["b"]), p["g"], p["h"])
        return nx.tsum(nx.mul(y, w))

    grads_ok(f, params)


def test_batched_matmul_both_sides(rng):
    params = {"a": leaf(rng.normal(size=(2, 3, 4)), "a"), "b": leaf(rng.normal(size=(2, 4, 5)), "b")}
    grads_ok(lambda p: nx.tsum(nx.power(nx.matmul(p["a"], p["b"]), 2.0)), params)


def test_indexing_reduction_shape_gradients(rng):
    params = {"x": leaf(rng.normal(size=(3, 4, 5)))}
    idx = np.array([[0, 2], [1, 3], [3, 3]])
    w = rng.normal(size=(5, 2, 3))

    def f(p):
        x = p["x"]
        picked = nx.take_rows(x, idx)  # duplicate index exercises accumulation
        fancy = nx.getitem(x, (np.array([0, 2, 2]), np.array([1, 1, 1])))
        basic = nx.getitem(x, (slice(None), 0))
        y = nx.transpose(nx.reshape(picked, (3, 2, 5)), (2, 1, 0))
        z = nx.concat([nx.tmean(fancy, axis=-1), nx.tsum(basic, axis=0)], axis=0)
        st_ = nx.stack([nx.tmean(x, axis=(0, 1)), nx.getitem(nx.swap_last(x), (0, slice(None), 0))], axis=0)
        return nx.add(nx.add(nx.tsum(nx.mul(y, w)), nx.tsum(nx.mul(z, z))), nx.tsum(nx.exp(st_)))

    grads_ok(f, params)


def test_scatter_rows_gradient(rng):
    params = {"x": leaf(rng.normal(size=(2, 2, 3)))}
    idx = np.array([[0, 3], [2, 1]])
    w = rng.normal(size=(2, 4, 3))
    grads_ok(lambda p: nx.tsum(nx.mul(nx.scatter_rows(p["x"], idx, 4), w)), params)


# -- engine behaviour -------------------------------------------------------

def test_backward_requires_scalar_root():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        nx.mul(x, 2.0).backward()


def test_shared_subexpression_accumulates():
    x = leaf(3.0)
    y = nx.mul(x, x)
    nx.add(y, y).backward()
    assert x.grad == pytest.approx(12.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with nx.no_grad():
        y = nx.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_finite_checks_raise_and_can_be_disabled():
    with np.errstate(invalid="ignore"):
        with nx.finite_checks(True), pytest.raises(nx.NonFiniteError):
            nx.log(Tensor([-1.0]))
        with nx.finite_checks(False):
            assert np.isnan(nx.log(Tensor([-1.0])).data[0])


def test_deep_chain_does_not_recurse():
    x = leaf(1.0)
    y = x
    for _ in range(5000):
        y = nx.mul(y, 1.0)
    y.backward()
    assert x.grad == 1.0


# -- gradient checker ----------------------------------------------------------

def test_gradcheck_flags_wrong_backward(rng):
    def bad_square(t):
        return _make(t.data**2, (t,), lambda g: (g * t.data,))  # should be 2 x g

    params = {"x": leaf(rng.normal(size=5) + 2.0)}
    rep = check_gradients(lambda p: nx.tsum(bad_square(p["x"])), params)
    assert not rep.passed
    # analytic x against true 2x: |x - 2x| / |2x|
    assert rep.max_rel_err["x"] == pytest.approx(0.5, abs=1e-6)


def test_gradcheck_directional_mode_detects_error(rng):
    def bad(t):
        return _make(np.sin(t.data), (t,), lambda g: (g * np.cos(t.data) * 1.01,))

    params = {"x": leaf(rng.normal(size=50))}
    good = check_gradients(lambda p: nx.tsum(nx.tanh(p["x"])), params, directions=3)
    wrong = check_gradients(lambda p: nx.tsum(bad(p["x"])), params, directions=3)
    assert good.passed and good.worst[1] < 1e-8
    assert not wrong.passed


def test_gradcheck_sampled_entries(rng):
    params = {"x": leaf(rng.normal(size=(10, 10)))}
    rep = check_gradients(lambda p: nx.tsum(nx.tanh(p["x"])), params, max_entries=7)
    assert rep.checked_entries["x"] == 7 and rep.passed


# -- optimizer ------------------------------------------------------------------

def adamw_oracle(p, grads, lrs, b1=0.9, b2=0.999, eps=1e-8, wd=0.01, decay=True):
    """Scalar reference loop written out term by term."""
    m = v = 0.0
    for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * (mhat / (math.sqrt(vhat) + eps) + (wd * p if decay else 0.0))
    return p


def test_adamw_first_step_closed_form():
    state = OptimizerState()
    out = adamw_step(state, {"w": leaf([[1.0]], "w")}, {"w": np.array([[0.5]])}, lr=0.1)
    assert out["w"].data[0, 0] == pytest.approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01), abs=1e-15)


def test_adamw_matches_scalar_oracle_over_steps():
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    lrs = [0.1, 0.05, 0.02, 0.01, 0.005]
    for decay in (True, False):
        state = OptimizerState(no_decay=frozenset() if decay else frozenset({"w"}))
        params = {"w": leaf([[0.8]], "w")}
        for g, lr in zip(grads, lrs):
            params = adamw_step(state, params, {"w": np.array([[g]])}, lr)
        assert params["w"].data[0, 0] == pytest.approx(adamw_oracle(0.8, grads, lrs, decay=decay), abs=1e-14)


def test_adamw_rejects_bad_gradients():
    params = {"w": leaf([[1.0]], "w")}
    with pytest.raises(FloatingPointError):
        adamw_step(OptimizerState(), params, {"w": np.array([[np.nan]])}, 0.1)
    with pytest.raises(ValueError):
        adamw_step(OptimizerState(), params, {"w": np.zeros(2)}, 0.1)


def test_lr_schedule_anchor_points():
    s = LrSchedule(1.0, 0.1, 100)
    assert s.warmup_steps == 10
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 5) == pytest.approx(0.5)
    assert lr_at(s, 10) == pytest.approx(1.0)
    assert lr_at(s, 55) == pytest.approx(0.5)
    assert lr_at(s, 100) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        lr_at(s, 101)


@given(st.floats(0.0, 0.5), st.integers(1, 500), st.data())
def test_lr_schedule_bounded_and_decaying(frac, total, data):
    s = LrSchedule(2e-3, frac, total)
    a = data.draw(st.integers(s.warmup_steps, total))
    b = data.draw(st.integers(a, total))
    assert 0.0 <= lr_at(s, b) <= lr_at(s, a) <= 2e-3 + 1e-18


# -- container ------------------------------------------------------------------

def test_container_golden_bytes():
    raw = container.dumps(np.array([1.0, -2.0]))
    expected = b"CRMA" + struct.pack("<IIIQ", 1, 0, 1, 2) + struct.pack("<dd", 1.0, -2.0)
    assert raw == expected


@given(st.lists(st.integers(0, 4), min_size=0, max_size=4))
def test_container_roundtrip_any_shape(shape):
    arr = np.random.default_rng(len(shape)).normal(size=shape)
    back = container.loads(container.dumps(arr))
    assert back.shape == arr.shape and back.dtype == np.float64
    np.testing.assert_array_equal(back, arr)


def test_container_roundtrip_special_values(tmp_path):
    arr = np.array([[np.inf, -0.0], [np.nan, 5e-324]])
    nx.save_crma(tmp_path / "a.crma", arr)
    back = nx.load_crma(tmp_path / "a.crma")
    assert back.tobytes() == arr.tobytes()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
        lambda b: b[:8] + struct.pack("<I", 1) + b[12:],
        lambda b: b[:-1],
        lambda b: b[:10],
    ],
    ids=["magic", "version", "dtype", "payload", "header"],
)
def test_container_rejects_corruption(mutate):
    raw = container.dumps(np.ones((2, 2)))
    with pytest.raises(container.ContainerError):
        container.loads(mutate(raw))
