import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpnn.optim import AdamWState, NonFiniteGradientError, adamw_step, finite_diff_check


def test_zero_gradient_without_decay_is_noop():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamWState(lr=0.1, weight_decay=0.0)
    adamw_step(state, p, {"w": np.zeros(3)})
    assert np.array_equal(p["w"], [1.0, -2.0, 3.0])


def test_first_step_closed_form():
    p = {"w": np.array(1.0)}
    state = AdamWState(lr=0.1, weight_decay=0.0)
    adamw_step(state, p, {"w": np.array(1.0)})
    # bias-corrected moments are both 1 at step 1
    assert float(p["w"]) == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)
    assert state.step == 1


def test_decoupled_weight_decay_term():
    p = {"w": np.array([2.0])}
    state = AdamWState(lr=0.1, weight_decay=0.5)
    adamw_step(state, p, {"w": np.zeros(1)})
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_decay_overrides_apply_per_parameter():
    p = {"a": np.array([2.0]), "b": np.array([2.0])}
    state = AdamWState(lr=0.1, weight_decay=0.5, decay_overrides={"b": 0.0})
    adamw_step(state, p, {"a": np.zeros(1), "b": np.zeros(1)})
    assert p["a"][0] < 2.0
    assert p["b"][0] == 2.0


def test_quadratic_descent_is_monotone():
    p = {"x": np.array(5.0)}
    state = AdamWState(lr=0.5, weight_decay=0.0)
    history = [abs(float(p["x"]))]
    for _ in range(10):
        adamw_step(state, p, {"x": 2.0 * p["x"]})
        history.append(abs(float(p["x"])))
    assert all(b < a for a, b in zip(history, history[1:]))


@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)))
@settings(max_examples=50, deadline=None)
def test_zero_learning_rate_keeps_parameters(g):
    p = {"w": np.linspace(-1, 1, 5)}
    before = p["w"].copy()
    adamw_step(AdamWState(lr=0.0, weight_decay=0.3), p, {"w": g})
    assert np.array_equal(p["w"], before)


def test_frozen_parameters_untouched():
    p = {"a": np.ones(2), "b": np.ones(2)}
    adamw_step(AdamWState(lr=0.1), p, {"a": np.ones(2)})
    assert np.array_equal(p["b"], np.ones(2))


def test_errors_name_the_parameter():
    p = {"w": np.ones(2)}
    with pytest.raises(NonFiniteGradientError, match="w"):
        adamw_step(AdamWState(), p, {"w": np.array([1.0, np.nan])})
    with pytest.raises(ValueError):
        adamw_step(AdamWState(), p, {"w": np.ones(3)})
    with pytest.raises(KeyError):
        adamw_step(AdamWState(), p, {"z": np.ones(2)})


def test_invalid_hyperparameters():
    with pytest.raises(ValueError):
        AdamWState(lr=-1.0)
    with pytest.raises(ValueError):
        AdamWState(beta1=1.0)


def test_identical_runs_are_bitwise_equal():
    def run():
        rng = np.random.default_rng(4)
        p = {"w": rng.normal(size=6)}
        state = AdamWState(lr=0.01)
        for _ in range(20):
            adamw_step(state, p, {"w": np.sin(p["w"]) + 0.1})
        return p["w"]

    assert np.array_equal(run(), run())


def _quad(params):
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    x = params["x"]
    return float(0.5 * x @ A @ x + params["c"][0] * x[0])


def test_finite_diff_exact_for_quadratic():
    params = {"x": np.array([0.7, -1.3]), "c": np.array([0.4])}
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    grads = {"x": A @ params["x"] + np.array([0.4, 0.0]), "c": np.array([0.7])}
    rep = finite_diff_check(_quad, params, grads, h=1e-5)
    assert rep.max_rel_err < 1e-10
    assert rep.passed
    assert rep.n_checked == 3


def test_finite_diff_locates_corrupted_coordinate():
    params = {"x": np.array([0.7, -1.3]), "c": np.array([0.4])}
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    grads = {"x": A @ params["x"] + np.array([0.4, 0.0]), "c": np.array([0.7])}
    grads["x"][1] *= 2.0
    rep = finite_diff_check(_quad, params, grads)
    assert not rep.passed
    assert rep.worst_param == "x[1]"
    assert rep.line().startswith("max_rel_err=") and rep.line().endswith("pass=false")


def test_finite_diff_scales_step_for_large_parameters():
    params = {"x": np.array([5e4])}
    rep = finite_diff_check(lambda p: float(p["x"][0] ** 2), params, {"x": np.array([1e5])})
    assert rep.max_rel_err < 1e-8


def test_finite_diff_reports_non_finite_loss():
    params = {"x": np.array([0.0])}
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda p: float(np.log(p["x"][0])), params, {"x": np.array([1.0])})


def test_finite_diff_does_not_modify_inputs():
    params = {"x": np.array([0.7, -1.3]), "c": np.array([0.4])}
    before = {k: v.copy() for k, v in params.items()}
    finite_diff_check(_quad, params, {"x": np.zeros(2)})
    for k in params:
        assert np.array_equal(params[k], before[k])
