"""Objective components: MSE, variance matching, smoothness, spectral hinge,
and the exact weighted-sum breakdown."""

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regimenas import tensor as T
from regimenas.blocks import BlendedModel, BlockConfig
from regimenas.losses import (
    Batch,
    LossBreakdown,
    LossWeights,
    loss_pred,
    loss_reg,
    loss_stable,
    loss_vol,
    total_loss,
    total_loss_tensors,
    windowed_vol,
)
from regimenas.tensor import GradTape, ShapeError, Tensor

N_FEAT = 5


def tiny_model(seed=3, **kw):
    cfg = BlockConfig(hidden_sizes=(64,), range_lags=3, kernel_sizes=(3,),
                      dilations=(1,), gate_width=4, **kw)
    return BlendedModel(cfg, N_FEAT, seed=seed)


def make_batch(rng, b=12, t=8):
    return Batch(
        x=rng.normal(size=(b, t, N_FEAT)),
        y=rng.normal(size=b) * 0.1,
        p=rng.dirichlet(np.ones(3), size=b),
        sigma=np.abs(rng.normal(size=(b, t))) * 0.02,
        log_volume=rng.normal(size=(b, t)),
    )


# ---------------------------------------------------------------------------
# weights / breakdown plumbing
# ---------------------------------------------------------------------------

def test_default_weights_match_documented_values():
    w = LossWeights()
    assert (w.w_p, w.w_v, w.w_r, w.w_s) == (1.0, 0.1, 0.05, 0.01)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(w_v=-0.1)


def test_breakdown_reconstructs_total_exactly(rng):
    model = tiny_model()
    batch = make_batch(rng)
    w = LossWeights()
    bd = total_loss(batch, model, w)
    rebuilt = (w.w_p * bd.pred + w.w_v * bd.vol + w.w_r * bd.reg
               + w.w_s * bd.stable)
    assert abs(bd.total - rebuilt) <= 1e-12
    for value in (bd.pred, bd.vol, bd.reg, bd.stable, bd.total):
        assert value >= 0.0


# ---------------------------------------------------------------------------
# prediction error
# ---------------------------------------------------------------------------

def test_perfect_predictions_cost_nothing(rng):
    y = rng.normal(size=17)
    assert loss_pred(y, y.copy()) == 0.0


def test_unit_error_gives_unit_mse():
    assert loss_pred([0.0, 0.0], [1.0, 1.0]) == 1.0


def test_mse_matches_extended_precision_oracle():
    r = np.random.default_rng(640)
    y = r.normal(size=64)
    f = r.normal(size=64)
    with mp.workdps(50):
        acc = mp.mpf(0)
        for a, b in zip(y, f):
            d = mp.mpf(a) - mp.mpf(b)
            acc += d * d
        want = float(acc / 64)
    assert abs(loss_pred(y, f) - want) < 1e-12


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        loss_pred(np.array([]), np.array([]))
    with pytest.raises(ShapeError):
        loss_pred(np.zeros(3), np.zeros(4))


def test_tensor_mode_matches_numpy_mode(rng):
    y = rng.normal(size=9)
    f = rng.normal(size=9)
    got = loss_pred(y, Tensor(f))
    assert isinstance(got, Tensor)
    assert abs(float(got.data) - loss_pred(y, f)) < 1e-15


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_mse_is_symmetric_and_nonnegative(values):
    y = np.array(values)
    f = y[::-1].copy()
    a = loss_pred(y, f)
    b = loss_pred(f, y)
    assert a >= 0.0
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


# ---------------------------------------------------------------------------
# variance matching
# ---------------------------------------------------------------------------

def test_identical_windows_cost_nothing(rng):
    y = rng.normal(size=20)
    assert loss_vol(y, y.copy()) == 0.0


def test_constant_prediction_pays_target_variance():
    # population variance of [-1, 1] is exactly 1
    assert loss_vol([-1.0, 1.0], [5.0, 5.0]) == 1.0


def test_short_window_rejected():
    with pytest.raises(ValueError):
        loss_vol([1.0], [1.0])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=16),
       st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_permuting_a_window_leaves_vol_loss_unchanged(values, seed):
    y = np.array(values)
    r = np.random.default_rng(seed)
    f = r.normal(size=y.size)
    perm = r.permutation(y.size)
    a = loss_vol(y, f)
    b = loss_vol(y[perm], f[perm])
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_windowed_vol_averages_full_windows(rng):
    y = rng.normal(size=45)
    f = rng.normal(size=45)
    got = windowed_vol(y, f, window=20)
    want = np.mean([loss_vol(y[:20], f[:20]), loss_vol(y[20:40], f[20:40])])
    assert abs(got - want) < 1e-15
    # short batches collapse to a single window
    assert windowed_vol(y[:7], f[:7], window=20) == loss_vol(y[:7], f[:7])


# ---------------------------------------------------------------------------
# output smoothness
# ---------------------------------------------------------------------------

def test_constant_outputs_cost_nothing():
    assert loss_reg(np.full(9, 3.25)) == 0.0


def test_alternating_outputs_unit_cost():
    assert loss_reg([0.0, 1.0, 0.0]) == 1.0


def test_vector_outputs_use_squared_norms():
    assert loss_reg(np.array([[0.0, 0.0], [1.0, 1.0]])) == 2.0


def test_single_output_rejected():
    with pytest.raises(ValueError):
        loss_reg([1.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20))
@settings(max_examples=50, deadline=None)
def test_smoothness_is_quadratically_homogeneous(values):
    f = np.array(values)
    a = loss_reg(f)
    b = loss_reg(2.0 * f)
    assert abs(b - 4.0 * a) <= 1e-9 * max(1.0, abs(b))


# ---------------------------------------------------------------------------
# spectral hinge
# ---------------------------------------------------------------------------

def test_contractive_layers_cost_nothing(rng):
    w1 = 0.5 * np.eye(4)
    w2 = rng.normal(size=(6, 3)) * 0.01
    assert loss_stable([w1, w2]) == 0.0


def test_excess_norm_pays_squared_hinge():
    w = np.diag([3.0, 1.0])
    # default budget carries power-iteration tolerance; tight budget is exact
    assert abs(loss_stable([w]) - 4.0) < 1e-5
    assert abs(loss_stable([w], iters=500, tol=1e-14) - 4.0) < 1e-12


def test_hinge_ignores_non_matrix_parameters(rng):
    # biases and scalars carry no spectral norm
    assert loss_stable([rng.normal(size=7), np.asarray(0.5)]) == 0.0


def test_spectral_gradient_matches_finite_differences(rng):
    w0 = rng.normal(size=(4, 4))
    w0 *= 1.8 / T.spectral_norm(w0, iters=3000, tol=1e-15)

    tw = Tensor(w0.copy(), requires_grad=True)
    with GradTape() as tape:
        out = loss_stable([tw], iters=3000, tol=1e-15)
    tape.backward(out)

    eps = 1e-6
    fd = np.zeros_like(w0)
    for i in range(4):
        for j in range(4):
            bump = w0.copy()
            bump[i, j] += eps
            hi = loss_stable([bump], iters=3000, tol=1e-15)
            bump[i, j] -= 2 * eps
            lo = loss_stable([bump], iters=3000, tol=1e-15)
            fd[i, j] = (hi - lo) / (2 * eps)
    np.testing.assert_allclose(tw.grad, fd, rtol=1e-3, atol=1e-8)


def test_hinge_accepts_model_and_dict(rng):
    model = tiny_model()
    via_model = loss_stable(model)
    via_dict = loss_stable(model.parameters())
    assert isinstance(via_model, Tensor)
    assert abs(float(via_model.data) - float(via_dict.data)) < 1e-15


# ---------------------------------------------------------------------------
# assembled objective
# ---------------------------------------------------------------------------

def test_pred_only_weights_reduce_total_to_mse(rng):
    model = tiny_model()
    batch = make_batch(rng)
    bd = total_loss(batch, model, LossWeights(1.0, 0.0, 0.0, 0.0))
    assert bd.total == bd.pred


def test_constant_perfect_fit_leaves_only_stability_term(rng):
    model = tiny_model()
    model.own_params["w_head"].data[:] = 0.0
    model.own_params["b_head"].data[:] = 0.75
    # uniform gate keeps sum(g * 0.75) free of softmax rounding
    model.gate.params["w_skip"].data[:] = 0.0
    batch = make_batch(rng)
    batch.y = np.full(len(batch), 0.75)
    bd = total_loss(batch, model)
    assert bd.pred == 0.0
    assert bd.vol == 0.0
    assert bd.reg == 0.0
    assert bd.stable > 0.0
    assert abs(bd.total - 0.01 * bd.stable) <= 1e-15


def test_components_match_independent_recomputation(rng):
    model = tiny_model(seed=8)
    batch = make_batch(rng, b=45)
    bd = total_loss(batch, model)

    y_hat = model.forward(batch.x, batch.p, sigma=batch.sigma,
                          log_volume=batch.log_volume).data
    pred = float(np.mean((batch.y - y_hat) ** 2))
    vol = float(np.mean([abs(np.var(y_hat[a:a + 20]) - np.var(batch.y[a:a + 20]))
                         for a in (0, 20)]))
    reg = float(np.mean(np.diff(y_hat) ** 2))
    stable = 0.0
    for w in model.parameters().values():
        if w.ndim == 2:
            sigma = np.linalg.svd(w.data, compute_uv=False)[0]
            stable += max(0.0, sigma - 1.0) ** 2

    assert abs(bd.pred - pred) < 1e-12
    assert abs(bd.vol - vol) < 1e-12
    assert abs(bd.reg - reg) < 1e-12
    assert abs(bd.stable - stable) < 2e-3 * max(1.0, stable)
    want_total = 1.0 * pred + 0.1 * vol + 0.05 * reg + 0.01 * bd.stable
    assert abs(bd.total - want_total) < 1e-12


def test_regime_scale_folds_into_reg_component(rng):
    model = tiny_model()
    batch = make_batch(rng)
    batch.p = np.tile(np.array([1.0, 0.0, 0.0]), (len(batch), 1))
    plain = total_loss(batch, model)
    scaled = total_loss(batch, model, regime_reg_scale=(2.0, 1.0, 0.5))
    assert abs(scaled.reg - 2.0 * plain.reg) < 1e-12
    w = LossWeights()
    rebuilt = (w.w_p * scaled.pred + w.w_v * scaled.vol + w.w_r * scaled.reg
               + w.w_s * scaled.stable)
    assert abs(scaled.total - rebuilt) <= 1e-12


def test_total_gradient_matches_finite_differences(rng):
    model = tiny_model(seed=5)
    # give the gate a live second layer so gradients reach w1 as well
    model.gate.params["w2"].data += rng.normal(size=model.gate.params["w2"].shape) * 0.1
    batch = make_batch(rng, b=8, t=6)
    weights = LossWeights(1.0, 0.1, 0.05, 0.0)  # spectral term tested separately

    with GradTape() as tape:
        root, _ = total_loss_tensors(batch, model, weights)
    tape.backward(root)

    params = model.parameters()
    names = ["w_in", "w_head", "alpha_raw", "gate.w1",
             sorted(k for k in params if k.startswith("volatility."))[0],
             sorted(k for k in params if k.startswith("trend."))[0],
             sorted(k for k in params if k.startswith("range."))[0]]
    probe = np.random.default_rng(0)
    worst = 0.0
    for name in names:
        p = params[name]
        assert p.grad is not None, name
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        idx = probe.choice(flat.size, size=min(4, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            eps = 1e-5
            flat[i] = orig + eps
            hi = total_loss(batch, model, weights).total
            flat[i] = orig - eps
            lo = total_loss(batch, model, weights).total
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1e-6)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    assert worst < 1e-4


def test_total_gradient_includes_spectral_term(rng):
    model = tiny_model(seed=5)
    batch = make_batch(rng, b=6, t=6)
    weights = LossWeights()
    kw = dict(sn_iters=3000, sn_tol=1e-15)

    with GradTape() as tape:
        root, _ = total_loss_tensors(batch, model, weights, **kw)
    tape.backward(root)

    p = model.parameters()["w_in"]
    flat = p.data.reshape(-1)
    gflat = p.grad.reshape(-1)
    probe = np.random.default_rng(1)
    for i in probe.choice(flat.size, size=6, replace=False):
        orig = flat[i]
        eps = 1e-5
        flat[i] = orig + eps
        hi = total_loss(batch, model, weights, **kw).total
        flat[i] = orig - eps
        lo = total_loss(batch, model, weights, **kw).total
        flat[i] = orig
        fd = (hi - lo) / (2 * eps)
        assert abs(fd - gflat[i]) <= 1e-3 * max(abs(fd), abs(gflat[i]), 1e-6)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_components_are_nonnegative(seed):
    r = np.random.default_rng(seed)
    bd = total_loss(make_batch(r), _SHARED_MODEL)
    assert bd.pred >= 0.0 and bd.vol >= 0.0
    assert bd.reg >= 0.0 and bd.stable >= 0.0 and bd.total >= 0.0


_SHARED_MODEL = tiny_model(seed=11)
