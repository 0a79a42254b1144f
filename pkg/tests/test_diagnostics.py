import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from klab.core import DriftField, KlabError, brownian_increments, brownian_path, make_drift
from klab.diagnostics import (
    Estimate,
    at_process,
    deterministic_ratio,
    effective_sample_size,
    estimates_agree,
    girsanov_mean,
    girsanov_weight,
    holder_exponent_regression,
    injectivity_margin,
    is_decreasing_to_floor,
    khasminskii_exp_moment,
    mean_estimate,
    median_of_means,
    mollified_convergence,
    mollify_drift,
    smoothed_signed_power,
    surjectivity_coverage,
    weak_expectation_direct,
    weak_expectation_reweighted,
)
from klab.kolmogorov import ZvonkinCorrector
from klab.sde import flow_ensemble, linear_flow_jacobian, simulate

CX = make_drift({"kind": "counterexample", "alpha": 0.6})
FREE = make_drift({"kind": "zero"})
CONST = make_drift({"kind": "constant", "c": 0.8})


def test_mean_and_median_of_means():
    rng = np.random.default_rng(0)
    s = rng.normal(2.0, 1.0, 64_000)
    est = mean_estimate(s, "plain", seed=0)
    assert est.se == pytest.approx(1 / math.sqrt(64_000), rel=0.02)
    assert abs(est.value - 2.0) < est.band
    med, se = median_of_means(s)
    assert abs(med - 2.0) < 4 * se
    assert est.to_dict()["band"] == 3 * est.se


def test_estimates_agree_uses_joint_band():
    a = Estimate("a", 10, 1.0, 0.1)
    assert estimates_agree(a, Estimate("b", 10, 1.4, 0.1))
    assert not estimates_agree(a, Estimate("b", 10, 1.5, 0.1))


def test_girsanov_weight_constant_drift_closed_form():
    T, dt = 1.0, 1e-2
    inc = brownian_increments(1, T, dt, 1, 50)
    gw = girsanov_weight(CONST, inc, np.zeros(2), dt)
    WT = inc.sum(axis=0)[:, 0]
    assert np.allclose(gw.log_phi, 0.8 * WT - 0.5 * 0.64 * T, atol=1e-12)
    # the free endpoint carries the same noise
    assert np.allclose(gw.free_end[:, 1], WT)


def test_girsanov_mean_is_one():
    est = girsanov_mean(CX, np.zeros(2), 1.0, 1e-2, 20_000, seed=3)
    assert abs(est.value - 1.0) <= est.band


def test_reweighted_matches_closed_form_mean():
    # constant drift: v_T = cT + W_T, so E v_T = cT
    out = weak_expectation_reweighted(lambda z: z[..., 1], CONST, 1.0, 20_000, np.zeros(2), 1e-2, seed=4)
    est = out["estimate"]
    assert abs(est.value - 0.8) <= est.band
    assert not out["degenerate"]
    direct = weak_expectation_direct(lambda z: z[..., 1], CONST, 1.0, 20_000, np.zeros(2), 1e-2, seed=5)
    assert abs(direct.value - 0.8) <= direct.band


def test_effective_sample_size():
    assert effective_sample_size(np.ones(10)) == pytest.approx(10)
    assert effective_sample_size(np.array([1.0, 0.0, 0.0])) == pytest.approx(1)


def test_khasminskii_constant_observable():
    out = khasminskii_exp_moment(lambda z: np.full(z.shape[:-1], 0.5), 1.0, 100, np.zeros((3, 2)))
    assert out["sup"] == pytest.approx(math.exp(0.5), rel=1e-12)
    assert out["alpha"] == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(KlabError):
        khasminskii_exp_moment(lambda z: -np.ones(z.shape[:-1]), 1.0, 10, np.zeros(2))


def test_at_process_vanishes_for_affine_corrector():
    U = ZvonkinCorrector.from_function(
        lambda z: np.stack([0 * z[..., 0], 0.1 * z[..., 0]], -1),
        lambda z: np.zeros(z.shape[:-1] + (2, 2)) + np.array([[0.0, 0.0], [0.1, 0.0]]),
        2.0,
        (32, 32),
    )
    path = brownian_path(1, 0.5, 1e-2)
    a = simulate(CX, np.array([0.1, 0.0]), path, 1e-2)
    b = simulate(CX, np.array([0.2, 0.0]), path, 1e-2)
    A = at_process(U, a, b)
    assert A.shape == (51,)
    assert np.allclose(A, 0.0, atol=1e-20)


def test_at_process_is_nondecreasing():
    def U(z):
        return np.stack([0 * z[..., 0], 0.05 * np.sin(z[..., 0]) * np.cos(z[..., 1])], -1)

    def DU(z):
        out = np.zeros(z.shape[:-1] + (2, 2))
        out[..., 1, 0] = 0.05 * np.cos(z[..., 0]) * np.cos(z[..., 1])
        out[..., 1, 1] = -0.05 * np.sin(z[..., 0]) * np.sin(z[..., 1])
        return out

    Uc = ZvonkinCorrector.from_function(U, DU, 4.0, (64, 64))
    path = brownian_path(2, 0.5, 1e-2)
    A = at_process(Uc, simulate(CX, np.array([0.1, 0.3]), path, 1e-2), simulate(CX, np.array([0.5, -0.2]), path, 1e-2))
    assert np.all(np.diff(A) >= 0) and A[-1] > 0


def test_holder_slope_exactly_two_for_free_flow():
    # common noise cancels: |Z^z - Z^y| = |e^{TA}(z - y)|
    out = holder_exponent_regression(FREE, 2.0, 1.0, [1e-3, 1e-2, 1e-1], 16, dt=0.1)
    assert out["slope"] == pytest.approx(2.0, abs=1e-8)
    with pytest.raises(KlabError):
        holder_exponent_regression(FREE, 1.0, 1.0, [1e-3, 1e-1], 4)
    with pytest.raises(KlabError):
        holder_exponent_regression(FREE, 2.0, 1.0, [1e-2, 1e-1], 4)


def test_deterministic_ratio_free_flow():
    e = np.array([0.0, 1e-3])
    assert deterministic_ratio(FREE, np.zeros(2), e, 1.0) == pytest.approx(np.linalg.norm(linear_flow_jacobian(1.0) @ [0, 1]), rel=1e-10)


def test_injectivity_margin_free_flow():
    pairs = np.array([[[0.0, 0.0], [0.01, 0.0]], [[1.0, 1.0], [1.0, 1.02]]])
    out = injectivity_margin(FREE, pairs, -1.0, 1.0, 64, dt=0.1)
    exact = [1 / 0.01, 1 / np.linalg.norm(linear_flow_jacobian(1.0) @ [0, 0.02])]
    assert np.allclose(out["values"], exact, rtol=1e-9)
    assert out["collapse_events"] == 0
    with pytest.raises(KlabError):
        injectivity_margin(FREE, pairs, 1.0, 1.0, 4)
    with pytest.raises(KlabError):
        injectivity_margin(FREE, np.zeros((1, 2, 2)), -1.0, 1.0, 4)


def test_surjectivity_coverage_inner_box():
    path = brownian_path(3, 0.5, 1e-2)
    ax = np.linspace(-3, 3, 41)
    fm = flow_ensemble(CX, np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2), path, 1e-2)
    out = surjectivity_coverage(fm, [-1, -1], [1, 1], 9, CX, path, 1e-2, tol=5e-2)
    assert out["coverage"] == 1.0 and out["residual_max"] < 5e-2
    far = surjectivity_coverage(fm, [10, 10], [11, 11], 3)
    assert far["coverage"] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(0.55, 0.95), st.floats(0.01, 1.0))
def test_smoothed_power_matches_quadrature(x, alpha, width):
    def integrand(y):
        u = x - width * y
        return math.copysign(abs(u) ** alpha, u) * math.exp(-0.5 * y * y) / math.sqrt(2 * math.pi)

    ref = quad(integrand, -12, 12, points=[x / width], limit=200)[0]
    assert smoothed_signed_power(np.array([x]), alpha, width)[0] == pytest.approx(ref, abs=1e-9)


def test_smoothed_power_far_field_and_zero_width():
    x = np.array([-50.0, -2.0, 0.0, 3.0, 80.0])
    assert np.array_equal(smoothed_signed_power(x, 0.6, 0.0), np.sign(x) * np.abs(x) ** 0.6)
    near = smoothed_signed_power(np.array([39.9, 40.1]), 0.6, 1.0)
    assert near[1] - near[0] == pytest.approx(0.2 * 0.6 * 40.0**-0.4, rel=1e-3)


def test_mollify_generic_drift_by_gauss_hermite():
    F = DriftField.from_callable(lambda z: z[..., :1] ** 2)
    z = np.array([[0.5, 0.1], [-1.0, 2.0]])
    # E (x - w Y)^2 = x^2 + w^2
    assert np.allclose(mollify_drift(F, 0.3)(z)[:, 0], z[:, 0] ** 2 + 0.09, atol=1e-12)
    assert mollify_drift(F, 0.0) is F
    with pytest.raises(KlabError):
        mollify_drift(F, -1.0)


def test_mollified_counterexample_converges_pointwise():
    z = np.array([[0.3, 0.0], [-0.01, 0.5]])
    errs = [np.abs(mollify_drift(CX, w)(z) - CX(z)).max() for w in (0.1, 0.01, 0.001)]
    assert errs[0] > errs[1] > errs[2]


def test_mollified_flow_discrepancy_decreases():
    out = mollified_convergence(CX, [0.25, 0.0625, 0.015625], [[0.0, 0.0], [0.3, -0.2]], 0.5, 64, dt=1e-2)
    d = out["discrepancy"]
    assert d[0] > d[1] > d[2]


def test_decreasing_to_floor():
    assert is_decreasing_to_floor([1.0, 0.5, 0.1, 0.2], floor=0.15)
    assert not is_decreasing_to_floor([1.0, 0.5, 0.6, 0.1], floor=0.15)
    assert is_decreasing_to_floor([3.0], floor=0.0)
