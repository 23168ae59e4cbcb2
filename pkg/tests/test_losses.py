import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpnn.data import DataError
from cpnn.deconv import ProportionMatrix
from cpnn.losses import (
    LossConfig,
    loss_patch,
    loss_patch_grads,
    loss_slide,
    loss_slide_grads,
    reference_rows,
    regularizer,
)
from cpnn.model import forward_slide, init_params
from cpnn.nb import nb_nll_batch
from oracles import scalar_slide_loss, tiny_random_prototype


def _slide_batch(seed, n=3, C=3, G=5, D=4):
    rng = np.random.default_rng(seed)
    P0 = tiny_random_prototype(rng, C, G)
    params = init_params(P0, D, seed=seed)
    params.tensors["proto_free"] += rng.normal(scale=0.2, size=(C, G))
    traces, targets = [], []
    for _ in range(n):
        counts = rng.integers(0, 40, size=G)
        counts[0] += 1
        traces.append(forward_slide(params, rng.normal(size=(int(rng.integers(1, 5)), D)), counts.sum()))
        targets.append(counts)
    theta = rng.uniform(0.5, 20, size=G)
    Wref = rng.dirichlet(np.ones(C), size=n)
    return params, traces, np.array(targets), theta, Wref


def test_lambda_zero_is_exactly_nb():
    params, traces, E, theta, Wref = _slide_batch(0)
    total, parts = loss_slide(traces, E, theta, Wref, params.proto(), params.proto_init, LossConfig(lam=0.0))
    mu = np.stack([t.mu_bar for t in traces])
    assert total == nb_nll_batch(E, mu, theta)
    assert parts["nb"] == total
    g = loss_slide_grads(traces, E, theta, Wref, params.proto(), params.proto_init, LossConfig(lam=0.0))
    assert not g["proto"].any() and not g["mean_weight"].any()


def test_zero_residuals_give_zero_regularizer():
    rng = np.random.default_rng(1)
    P = tiny_random_prototype(rng, 3, 4)
    W = rng.dirichlet(np.ones(3), size=5)
    assert regularizer(P, P.copy(), W, W.copy()) == 0.0
    assert regularizer(P, P + 0.1, W, W) > 0.0


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_regularizer_nonnegative(seed):
    rng = np.random.default_rng(seed)
    P, Q = rng.random((2, 3, 4))
    W, V = rng.dirichlet(np.ones(3), size=(2, 4))
    assert regularizer(P, Q, W, V) >= 0.0


@pytest.mark.parametrize("seed", range(20))
def test_slide_loss_matches_scalar_recomputation(seed):
    params, traces, E, theta, Wref = _slide_batch(seed)
    lam = float(np.random.default_rng(seed).uniform(0.1, 1e3))
    total, _ = loss_slide(traces, E, theta, Wref, params.proto(), params.proto_init, LossConfig(lam=lam))
    ref = scalar_slide_loss(
        E.tolist(), [t.mu_bar.tolist() for t in traces], theta.tolist(), Wref.tolist(),
        [t.mean_weight.tolist() for t in traces], params.proto().tolist(), params.proto_init.tolist(), lam,
    )
    assert abs(total - ref) <= 1e-10 * max(1.0, abs(ref))


def test_slide_grads_match_finite_differences():
    params, traces, E, theta, Wref = _slide_batch(3)
    cfg = LossConfig(lam=2.5)
    P, P0 = params.proto(), params.proto_init
    mu = [t.mu_bar.copy() for t in traces]
    g = loss_slide_grads(traces, E, theta, Wref, P, P0, cfg)
    h = 1e-6

    def f(theta_=theta, P_=P, mu_=None, wbar=None):
        ts = []
        for i, t in enumerate(traces):
            ts.append(type(t)(**{**t.__dict__, "mu_bar": mu_[i] if mu_ is not None else mu[i],
                                 "mean_weight": wbar[i] if wbar is not None else t.mean_weight}))
        return loss_slide(ts, E, theta_, Wref, P_, P0, cfg)[0]

    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        assert (f(theta_=theta + e) - f(theta_=theta - e)) / (2 * h) == pytest.approx(g["theta"][j], rel=1e-5)
    for c, j in np.ndindex(P.shape):
        e = np.zeros_like(P)
        e[c, j] = h
        assert (f(P_=P + e) - f(P_=P - e)) / (2 * h) == pytest.approx(g["proto"][c, j], rel=1e-5, abs=1e-7)
    W = np.stack([t.mean_weight for t in traces])
    for i, c in np.ndindex(W.shape):
        e = np.zeros_like(W)
        e[i, c] = h
        assert (f(wbar=W + e) - f(wbar=W - e)) / (2 * h) == pytest.approx(g["mean_weight"][i, c], rel=1e-5, abs=1e-7)
    M = np.stack(mu)
    for i, j in np.ndindex(M.shape):
        e = np.zeros_like(M)
        e[i, j] = 1e-4 * M[i, j]
        num = (f(mu_=M + e) - f(mu_=M - e)) / (2 * e[i, j])
        assert num == pytest.approx(g["mu_bar"][i, j], rel=1e-5, abs=1e-9)


def test_missing_reference_rows():
    Wref = ProportionMatrix([[0.5, 0.5]], ["a"], ["x", "y"])
    assert reference_rows(Wref, ["a"]).tolist() == [[0.5, 0.5]]
    with pytest.raises(DataError):
        reference_rows(Wref, ["a", "b"])
    params, traces, E, theta, _ = _slide_batch(4)
    with pytest.raises(DataError):
        loss_slide(traces, E, theta, None, params.proto(), params.proto_init, LossConfig(lam=1.0))


def test_patch_loss_examples():
    rng = np.random.default_rng(5)
    obs = rng.integers(0, 30, size=(6, 8)).astype(float)
    obs[:, 0] += 1
    P = tiny_random_prototype(rng, 2, 8)
    cfg = LossConfig(patch_log1p=False, patch_lambda=0.0)
    assert loss_patch(obs, obs, P, P, cfg)[1]["corr"] == pytest.approx(0.0, abs=1e-12)
    assert loss_patch(3.0 * obs + 7.0, obs, P, P, cfg)[1]["corr"] == pytest.approx(0.0, abs=1e-12)
    assert loss_patch(-obs, obs, P, P, cfg)[1]["corr"] == pytest.approx(2.0, abs=1e-12)
    # log1p default: identical inputs still give zero
    assert loss_patch(obs, obs, P, P, LossConfig())[1]["corr"] == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_patch_term_in_range(seed):
    rng = np.random.default_rng(seed)
    pred = rng.gamma(1.0, 5.0, size=(4, 6))
    obs = rng.integers(0, 20, size=(4, 6)).astype(float)
    obs[:, 0] += 1
    P = tiny_random_prototype(rng, 2, 6)
    corr = loss_patch(pred, obs, P, P, LossConfig())[1]["corr"]
    assert 0.0 <= corr <= 2.0


def test_patch_regularizer_weighting():
    rng = np.random.default_rng(6)
    obs = rng.integers(1, 20, size=(3, 5)).astype(float)
    obs[:, 0] = 0
    P0 = tiny_random_prototype(rng, 2, 5)
    P = P0 + 0.1
    t1, parts = loss_patch(obs + 1, obs, P, P0, LossConfig(patch_lambda=2.0))
    assert t1 == pytest.approx(parts["corr"] + 2.0 * np.sum((P - P0) ** 2))


def test_zero_variance_rows():
    obs = np.array([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]])
    P = np.full((1, 3), 1 / 3)
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        total, _ = loss_patch(obs, obs, P, P, LossConfig())
    assert total == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DataError):
        loss_patch(np.ones((2, 3)), obs, P, P, LossConfig())


@pytest.mark.parametrize("log1p,axis", [(True, "spot"), (False, "spot"), (True, "gene")])
def test_patch_grads_match_finite_differences(log1p, axis):
    rng = np.random.default_rng(7)
    pred = rng.gamma(2.0, 3.0, size=(4, 6))
    obs = rng.integers(0, 20, size=(4, 6)).astype(float)
    obs[0] += np.arange(6)
    obs[:, 0] += np.arange(4)
    P0 = tiny_random_prototype(rng, 2, 6)
    P = P0 + rng.normal(scale=0.05, size=P0.shape)
    cfg = LossConfig(patch_log1p=log1p, patch_lambda=0.7, patch_axis=axis)
    g = loss_patch_grads(pred, obs, P, P0, cfg)
    h = 1e-6
    for idx in np.ndindex(pred.shape):
        e = np.zeros_like(pred)
        e[idx] = h
        num = (loss_patch(pred + e, obs, P, P0, cfg)[0] - loss_patch(pred - e, obs, P, P0, cfg)[0]) / (2 * h)
        assert num == pytest.approx(g["pred"][idx], rel=1e-4, abs=1e-8)
    for idx in np.ndindex(P.shape):
        e = np.zeros_like(P)
        e[idx] = h
        num = (loss_patch(pred, obs, P + e, P0, cfg)[0] - loss_patch(pred, obs, P - e, P0, cfg)[0]) / (2 * h)
        assert num == pytest.approx(g["proto"][idx], rel=1e-4, abs=1e-8)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)
    with pytest.raises(ValueError):
        LossConfig(patch_axis="cell")
