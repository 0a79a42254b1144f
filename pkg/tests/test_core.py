import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from klab.core import (
    Boundary,
    CutoffSpec,
    DriftField,
    DriftSpecError,
    GridFunction,
    NoisePath,
    PhasePoint,
    brownian_increments,
    brownian_path,
    config_hash,
    make_drift,
    smooth_cutoff,
    smooth_cutoff_gradient,
)

finite = st.floats(-5, 5, allow_nan=False)


def test_phase_point_round_trip():
    p = PhasePoint((1.0, 2.0), (3.0, 4.0))
    assert p.d == 2
    assert PhasePoint.from_array(p.as_array()) == p
    with pytest.raises(ValueError):
        PhasePoint((1.0,), (2.0, 3.0))
    with pytest.raises(ValueError):
        PhasePoint((np.nan,), (0.0,))


def test_cutoff_plateaus():
    spec = CutoffSpec(2.0, 4.0)
    assert smooth_cutoff(spec, np.array([1.0, 1.0])) == 1.0
    assert smooth_cutoff(spec, np.array([3.0, 3.0])) == 0.0
    mid = smooth_cutoff(spec, np.array([3.0, 0.0]))
    assert 0.0 < mid < 1.0
    with pytest.raises(DriftSpecError):
        CutoffSpec(3.0, 2.0)


@settings(max_examples=50, deadline=None)
@given(finite, finite)
def test_cutoff_gradient_matches_differences(x, v):
    spec = CutoffSpec(2.0, 4.0)
    z = np.array([x, v])
    h = 1e-6
    fd = [(smooth_cutoff(spec, z + e) - smooth_cutoff(spec, z - e)) / (2 * h) for e in np.eye(2) * h]
    assert np.allclose(smooth_cutoff_gradient(spec, z), fd, atol=1e-5)


def test_counterexample_drift_inside_ball():
    F = make_drift({"kind": "counterexample", "alpha": 0.6})
    z = np.array([[0.5, 0.1], [-0.25, 0.3]])
    expected = np.sign(z[:, :1]) * np.abs(z[:, :1]) ** 0.6
    assert np.allclose(F(z), expected, rtol=0, atol=1e-15)
    assert F(np.array([10.0, 0.0]))[0] == 0.0
    assert np.all(F.div_v(z) == 0.0)


@settings(max_examples=50, deadline=None)
@given(finite, finite)
def test_counterexample_div_v_matches_differences(x, v):
    F = make_drift({"kind": "counterexample", "alpha": 0.7})
    z = np.array([x, v])
    h = 1e-6
    fd = (F(z + [0, h])[0] - F(z - [0, h])[0]) / (2 * h)
    assert F.div_v(z) == pytest.approx(fd, abs=1e-5)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.2, -0.1])
def test_counterexample_rejects_alpha_outside_interval(alpha):
    with pytest.raises(DriftSpecError, match="1/2, 1"):
        make_drift({"kind": "counterexample", "alpha": alpha})


def test_drift_catalog_kinds():
    z = np.zeros((3, 4))
    assert np.all(make_drift({"kind": "zero", "d": 2})(z) == 0)
    assert np.all(make_drift({"kind": "constant", "d": 2, "c": [1.0, -2.0]})(z) == [1.0, -2.0])
    prod = make_drift({"kind": "product", "phi": lambda v: np.cos(v), "G": lambda x: x})
    assert prod(np.array([2.0, 0.0]))[0] == 2.0
    custom = DriftField.from_callable(lambda z: z[..., :1] ** 2)
    assert custom(np.array([3.0, 1.0]))[0] == 9.0
    assert custom.div_v(np.array([3.0, 1.0])) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(DriftSpecError):
        make_drift({"kind": "nonsense"})
    with pytest.raises(ValueError):
        make_drift({"kind": "zero"})(np.zeros(3))


def test_grid_drift_interpolates_linear_data():
    g = GridFunction.sample(lambda z: (2 * z[..., 0] + z[..., 1])[..., None], 4.0, (16, 16))
    F = make_drift({"kind": "grid", "grid": g})
    z = np.array([[0.3, -1.1], [1.7, 2.2]])
    assert np.allclose(F(z)[:, 0], 2 * z[:, 0] + z[:, 1])


def test_grid_function_save_load(tmp_path):
    g = GridFunction.sample(lambda z: np.sin(z[..., 0]) * z[..., 1], (3.0, 5.0), (8, 10), Boundary.PERIODIC)
    g.save(tmp_path / "g.bin")
    back = GridFunction.load(tmp_path / "g.bin")
    assert back.L == g.L and back.n == g.n and back.boundary is Boundary.PERIODIC
    assert np.array_equal(back.values, g.values)
    assert g.spacing == (0.75, 1.0)


def test_grid_function_rejects_bad_input():
    with pytest.raises(ValueError):
        GridFunction((1.0,), (8,), np.zeros(8))
    with pytest.raises(ValueError):
        GridFunction((1.0, 1.0), (8, 8), np.full((8, 8), np.nan))


def test_noise_path_is_deterministic_and_coarsens_by_summing():
    a = brownian_path(7, 1.0, 1e-3)
    b = brownian_path(7, 1.0, 1e-3)
    assert np.array_equal(a.increments, b.increments)
    c = a.coarsen(10)
    assert c.n_steps == 100
    assert np.allclose(c.W()[-1], a.W()[-1], atol=1e-14)
    assert np.allclose(a.at_step(1e-2).increments, c.increments)
    assert NoisePath.from_dict(a.to_dict()).identity() == a.identity()
    with pytest.raises(ValueError):
        a.coarsen(7)


def test_batched_increments_match_single_paths():
    inc = brownian_increments(3, 0.5, 1e-2, 2, 4, start=2)
    for j in range(4):
        assert np.array_equal(inc[:, j], brownian_path(3, 0.5, 1e-2, 2, index=2 + j).increments)


def test_noise_increment_statistics():
    inc = brownian_increments(11, 1.0, 1e-2, 1, 2000)
    WT = inc.sum(axis=0)[:, 0]
    # W_T ~ N(0, 1): mean and variance within 4 standard errors
    assert abs(WT.mean()) < 4 / np.sqrt(2000)
    assert abs(WT.var() - 1) < 4 * np.sqrt(2 / 2000)


def test_config_hash_is_order_free():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
