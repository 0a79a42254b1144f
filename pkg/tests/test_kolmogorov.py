import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from klab.core import Boundary, GridFunction, KlabError, make_drift
from klab.gauss import ou_covariance, ou_mean
from klab.kolmogorov import (
    DivergenceError,
    NoAdmissibleLambda,
    ResolventConfig,
    ZvonkinCorrector,
    build_zvonkin_U,
    derivative_along,
    lattice_gradient,
    quadrature,
    resolvent_apply,
    resolvent_report,
    solve_with_drift,
)

CX = make_drift({"kind": "counterexample", "alpha": 0.6})


def _poly(f, n=64):
    return GridFunction.sample(f, 8.0, (n, n), Boundary.EXTRAPOLATED)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 100.0))
def test_quadrature_exact_on_linear_integrands(lam):
    t, w = quadrature(ResolventConfig(lam))
    assert w.sum() == pytest.approx(1 / lam, rel=1e-12)
    assert (w * t).sum() == pytest.approx(1 / lam**2, rel=1e-9)


def test_config_validation():
    with pytest.raises(KlabError):
        ResolventConfig(0.0)
    with pytest.raises(KlabError):
        ResolventConfig(10.0, t_max=0.1)
    with pytest.raises(KlabError):
        ResolventConfig(10.0, quad_rule="simpson")
    assert ResolventConfig(10.0).with_lam(5.0).lam == 5.0


def test_gauss_laguerre_weights():
    t, w = quadrature(ResolventConfig(4.0, n_quad=10, quad_rule="gausslaguerre"))
    # exact for t^k, k < 20: int t^3 e^{-4t} dt = 6 / 4^4
    assert (w * t**3).sum() == pytest.approx(6 / 4**4, rel=1e-12)


@pytest.mark.parametrize(
    "g, exact",
    [
        (lambda z: np.ones(z.shape[:-1]), lambda z, lam: np.full(z.shape[:-1], 1 / lam)),
        (lambda z: z[..., 1], lambda z, lam: z[..., 1] / lam),
        (lambda z: z[..., 0], lambda z, lam: z[..., 0] / lam + z[..., 1] / lam**2),
        # P_t v^2 = v^2 + t
        (lambda z: z[..., 1] ** 2, lambda z, lam: z[..., 1] ** 2 / lam + 1 / lam**2),
    ],
)
def test_resolvent_polynomial_oracles(g, exact):
    lam = 10.0
    gf = _poly(g)
    out = resolvent_apply(gf, ResolventConfig(lam))
    assert np.abs(out.values - exact(gf.mesh(), lam)).max() < 1e-9


def test_resolvent_gaussian_against_time_integral():
    lam = 2.0

    def pt(t, z):
        m = ou_mean(t, z)
        A = np.eye(2) + ou_covariance(t, 1).cov
        return math.exp(-0.5 * m @ np.linalg.solve(A, m)) / math.sqrt(np.linalg.det(A))

    g = GridFunction.sample(lambda z: np.exp(-0.5 * np.sum(z**2, -1)), 8.0, (64, 64), Boundary.ZERO)
    out = resolvent_apply(g, ResolventConfig(lam))
    ax = g.axes()
    for i, j in [(32, 32), (36, 30), (28, 40)]:
        z = np.array([ax[0][i], ax[1][j]])
        ref = quad(lambda t: math.exp(-lam * t) * pt(t, z), 0, np.inf, limit=200)[0]
        assert out.values[i, j] == pytest.approx(ref, abs=1e-3)


def test_derivatives_exact_on_polynomials_and_modes():
    h = 0.1
    x = -3 + h * np.arange(60)
    d = derivative_along(x**3, 0, h, Boundary.ZERO)
    assert np.allclose(d, 3 * x**2, atol=1e-9)
    n = 64
    xp = -np.pi + 2 * np.pi * np.arange(n) / n
    dp = derivative_along(np.sin(3 * xp), 0, 2 * np.pi / n, Boundary.PERIODIC)
    assert np.allclose(dp, 3 * np.cos(3 * xp), atol=1e-11)


def test_lattice_gradient_blocks():
    g = _poly(lambda z: z[..., 0] ** 2 + 3 * z[..., 1], n=32)
    full = lattice_gradient(g, "all")
    x = g.mesh()[..., 0]
    assert np.allclose(full[..., 0], 2 * x, atol=1e-9)
    assert np.allclose(full[..., 1], 3.0, atol=1e-9)
    assert np.allclose(lattice_gradient(g, "v")[..., 0], 3.0, atol=1e-9)


def test_fixed_point_constant_drift_oracle():
    # (lam - L - c d_v) psi = v  has  psi = v / lam + c / lam^2
    F = make_drift({"kind": "constant", "c": 0.7})
    g = _poly(lambda z: z[..., 1])
    res = solve_with_drift(g, F, ResolventConfig(10.0))
    assert res.converged
    assert np.abs(res.psi.values - (g.mesh()[..., 1] / 10 + 0.007)).max() < 1e-10


def test_fixed_point_zero_drift_is_resolvent():
    g = GridFunction.sample(lambda z: np.exp(-np.sum(z**2, -1)), 8.0, (32, 32))
    cfg = ResolventConfig(5.0)
    res = solve_with_drift(g, make_drift({"kind": "zero"}), cfg)
    assert np.array_equal(res.psi.values, resolvent_apply(g, cfg).values)
    assert res.contraction_estimate == 0.0


def test_contraction_decreases_with_lambda():
    proto = GridFunction((8.0, 8.0), (32, 32), np.zeros((32, 32)))
    g = proto.with_values(CX(proto.mesh())[..., 0])
    est = [solve_with_drift(g, CX, ResolventConfig(lam)).contraction_estimate for lam in (5.0, 20.0, 80.0)]
    assert est[0] > est[1] > est[2] and est[0] < 1


def test_divergence_reported_for_strong_drift():
    strong = make_drift({"kind": "custom", "func": lambda z: 60 * np.tanh(z[..., 1:])})
    g = GridFunction.sample(lambda z: np.exp(-np.sum(z**2, -1)), 8.0, (32, 32))
    with pytest.raises(DivergenceError):
        solve_with_drift(g, strong, ResolventConfig(0.5))


def test_report_norms_present():
    g = GridFunction.sample(lambda z: np.exp(-np.sum(z**2, -1)), 8.0, (32, 32))
    cfg = ResolventConfig(10.0)
    res = solve_with_drift(g, CX, cfg)
    rep = resolvent_report(res, g, cfg)
    assert set(rep["norms"]) >= {"lam_psi_p", "sqrt_lam_Dv_psi_p", "Dvv_psi_p", "v_Dx_psi_p"}
    assert all(math.isfinite(v) for v in rep["norms"].values())


def test_zvonkin_corrector_certified_on_small_lattice():
    U = build_zvonkin_U(CX, L=8.0, n=32, stop_at_first=False)
    assert U.sup_report["total"] < 0.5
    assert U.lam == 10.0
    est = [r["contraction_estimate"] for r in U.sweep]
    assert all(b < a for a, b in zip(est, est[1:]))
    # first block of U is zero
    assert np.all(U.U.values[..., 0] == 0)
    z = np.array([[0.3, -0.1], [100.0, 0.0]])
    assert U.inside(z).tolist() == [True, False]
    assert np.all(U.U_at(z)[1] == 0)


def test_no_admissible_lambda_carries_report():
    with pytest.raises(NoAdmissibleLambda) as info:
        build_zvonkin_U(CX, lam_sweep=[0.5], L=8.0, n=32)
    assert info.value.report[0]["total"] >= 0.5


def test_corrector_rejects_large_norm():
    with pytest.raises(KlabError):
        ZvonkinCorrector.from_function(
            lambda z: np.stack([0 * z[..., 0], 0.4 * np.ones(z.shape[:-1])], -1),
            lambda z: np.zeros(z.shape[:-1] + (2, 2)) + np.array([[0, 0], [0.2, 0]]),
            4.0,
            (16, 16),
        )
