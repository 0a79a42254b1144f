import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from klab.characteristics import (
    BranchDomainError,
    BranchOverflow,
    BranchSolution,
    OutsideValidity,
    branch_params,
    branch_solution,
    coalescing_pair,
    deterministic_transport_eval,
    integrate_ode,
    nonuniqueness_run,
    reached_set,
    write_trajectory_csv,
)
from klab.core import DriftField, make_drift

CX = make_drift({"kind": "counterexample", "alpha": 0.6})


def test_branch_parameters_at_alpha_06():
    beta, A = branch_params(0.6)
    assert beta == pytest.approx(5.0, rel=1e-15)
    # ((1 - a)^2 / (2 (1 + a)))^(1 / (1 - a)) = 0.05^2.5
    assert A == pytest.approx(0.05**2.5, rel=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 0.95))
def test_power_ansatz_balances(alpha):
    # x = A t^beta solves x'' = x^alpha iff A beta (beta - 1) = A^alpha and beta - 2 = alpha beta
    beta, A = branch_params(alpha)
    assert beta - 2 == pytest.approx(alpha * beta, rel=1e-12)
    assert A * beta * (beta - 1) == pytest.approx(A**alpha, rel=1e-10)


def test_domain_and_overflow_guards():
    with pytest.raises(BranchDomainError):
        branch_params(0.4)
    with pytest.raises(BranchDomainError):
        branch_params(1.0)
    with pytest.raises(BranchOverflow):
        branch_params(0.999)
    with pytest.raises(BranchDomainError):
        BranchSolution(0.6, sign=2)


def test_branch_residual_on_validity_window():
    b = BranchSolution(0.6)
    T = b.valid_until()
    assert np.linalg.norm(b.state(T)) == pytest.approx(0.9 * 2.0, rel=1e-10)
    t = np.linspace(0, T, 1001)
    assert np.abs(b.residual(t)).max() < 1e-9
    with pytest.raises(OutsideValidity):
        branch_solution(b, T + 0.1)
    assert branch_solution(b, 1.0).x[0] == pytest.approx(b.A, rel=1e-14)


def test_delayed_and_mirrored_branches():
    b = BranchSolution(0.6, t0=0.5, sign=-1)
    assert np.all(b.state([0.0, 0.5]) == 0)
    assert b.state(1.5)[0] == pytest.approx(-branch_params(0.6)[1], rel=1e-14)
    assert np.abs(b.residual(np.linspace(0, b.valid_until(), 101))).max() < 1e-9


def test_rk4_fourth_order_on_oscillator():
    F = DriftField.from_callable(lambda z: -z[..., :1])
    z0 = np.array([1.0, 0.0])
    errs = []
    for dt in (0.1, 0.05):
        end = integrate_ode(F, z0, 2.0, dt, keep=False).end
        errs.append(abs(end[0] - math.cos(2.0)))
    assert math.log2(errs[0] / errs[1]) == pytest.approx(4.0, abs=0.2)


def test_backward_integration_inverts_forward():
    z0 = np.array([[0.5, 0.2], [-0.3, 0.7]])
    fwd = integrate_ode(CX, z0, 0.8, 1e-3, keep=False).end
    back = integrate_ode(CX, fwd, 0.0, 1e-3, t_start=0.8, keep=False).end
    assert np.allclose(back, z0, atol=1e-10)


def test_nonuniqueness_run_tracks_branch():
    run = nonuniqueness_run(0.6, 0.5, eps=1e-2, dt=1e-3)
    assert run.tracking_error() < 1e-6
    assert np.all(run.zero.z == 0)
    assert run.separation()[-1] == pytest.approx(np.linalg.norm(BranchSolution(0.6).state(0.5)), rel=1e-4)


def test_reached_set_lies_on_branches():
    pts = reached_set(0.6, 1.0, n_onsets=11)
    assert pts.shape == (22, 2)
    beta, A = branch_params(0.6)
    # every point (x, v) on a branch satisfies |v| = beta A^(1/beta) |x|^(1 - 1/beta)
    x, v = pts[:, 0], pts[:, 1]
    assert np.allclose(np.abs(v), beta * A ** (1 / beta) * np.abs(x) ** (1 - 1 / beta), atol=1e-14)
    assert np.all(np.sign(x) * np.sign(v) >= 0)


def test_coalescing_pair_meets_at_origin():
    p, q = coalescing_pair(0.6, 0.3)
    assert np.allclose(p.as_array(), -q.as_array())
    ends = integrate_ode(CX, np.stack([p.as_array(), q.as_array()]), 0.3, 1e-4, keep=False).end
    assert np.abs(ends).max() < 1e-5


def test_transport_eval_free_flow():
    F0 = make_drift({"kind": "zero"})

    def f0(z):
        return np.sin(z[..., 0]) + z[..., 1] ** 2

    z = np.array([[0.3, 0.4], [-1.0, 2.0]])
    vals, flags = deterministic_transport_eval(f0, F0, 0.7, z)
    exact = np.sin(z[:, 0] - 0.7 * z[:, 1]) + z[:, 1] ** 2
    assert np.allclose(vals, exact, atol=1e-12)
    assert not flags.any()


def test_transport_eval_flags_origin_passage():
    _, flags = deterministic_transport_eval(lambda z: z[..., 0], CX, 0.3, np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert flags.tolist() == [True, False]


def test_trajectory_csv(tmp_path):
    tr = integrate_ode(CX, np.array([0.1, 0.2]), 0.01, 1e-3)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, tr, branch_id=3)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "x1", "v1", "branch_id"]
    assert len(rows) == len(tr.t) + 1
    assert float(rows[-1][1]) == tr.z[-1, 0]
