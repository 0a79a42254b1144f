"""Experiment orchestration: stages, verdicts and reproducible artifacts.

Each registered experiment is a list of independent stages. A stage maps
the configuration to tables (written as CSV) and verdicts (collected into
one JSON file). Stages get their own seed stream, so the result does not
depend on how the worker pool schedules them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import REGISTRY, ExperimentConfig, serialize
from .core import Boundary, DriftField, GridFunction, KlabError, NoisePath, brownian_increments, config_hash, make_drift, make_rng

# ---------------------------------------------------------------------------
# report types


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list]
    # (x column, y columns, log x, log y) for the static plot, or None
    plot: tuple | None = None


@dataclass
class Verdict:
    name: str
    passed: bool
    value: float | None = None
    threshold: float | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"passed": bool(self.passed), "value": _num(self.value), "threshold": _num(self.threshold), "detail": self.detail}


@dataclass
class StageResult:
    tables: list[Table] = field(default_factory=list)
    verdicts: list[Verdict] = field(default_factory=list)


@dataclass
class Report:
    name: str
    out_dir: Path
    verdicts: dict
    files: dict
    manifest: dict

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts.values())


class StageError(KlabError):
    """A numeric failure inside a stage, tagged with the module that raised it."""

    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        self.module = type(exc).__module__
        super().__init__(f"stage {stage!r} failed in {self.module}: {type(exc).__name__}: {exc}")


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else repr(x)


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# ---------------------------------------------------------------------------
# run context


class Context:
    def __init__(self, cfg: ExperimentConfig, scheme: str):
        from .sde import Scheme

        self.cfg = cfg
        self.scheme = Scheme.parse(scheme)
        self.F = make_drift(dict(cfg.drift, d=cfg.numeric["d"]))
        self._corrector = None
        self._lock = threading.Lock()

    @property
    def alpha(self) -> float:
        return float(self.cfg.drift.get("alpha", 0.6))

    def p(self, key, default):
        return self.cfg.params.get(key, default)

    def seed(self, stage: int) -> int:
        # one independent master seed per stage
        return int(make_rng(self.cfg.seed, 50_000 + stage).integers(0, 2**31 - 1))

    def corrector(self):
        """Zvonkin corrector for the configured drift, built once per run."""
        from .sde import Scheme

        if self.scheme is not Scheme.ZVONKIN:
            return None
        with self._lock:
            if self._corrector is None:
                from .kolmogorov import build_zvonkin_U

                num = self.cfg.numeric
                self._corrector = build_zvonkin_U(self.F, num["lam_sweep"], L=num["L"], n=num["n"])
            return self._corrector


# ---------------------------------------------------------------------------
# stages


def _ou_table(ctx: Context) -> StageResult:
    from .gauss import ou_covariance

    rows, worst_cov, worst_det = [], 0.0, 0.0
    for d in ctx.p("dims", [1, 2]):
        for t in ctx.p("times", [0.1, 1.0, 10.0]):
            tr = ou_covariance(float(t), int(d))
            exact = np.kron(np.array([[t**3 / 3, t**2 / 2], [t**2 / 2, t]]), np.eye(d))
            det_res = tr.logdet - d * math.log(t**4 / 12.0)
            cov_err = float(np.abs(tr.cov - exact).max())
            worst_cov = max(worst_cov, cov_err)
            worst_det = max(worst_det, abs(det_res))
            rows.append([d, t, tr.cov[0, 0], tr.cov[0, d], tr.cov[d, d], tr.logdet, det_res, cov_err])
    res = StageResult()
    res.tables.append(Table("ou_covariance", ["d", "t", "Q_xx", "Q_xv", "Q_vv", "logdet", "logdet_residual", "max_entry_error"], rows))
    res.verdicts.append(Verdict("ou_covariance_exact", worst_cov <= 1e-12, worst_cov, 1e-12))
    res.verdicts.append(Verdict("ou_logdet_scaling", worst_det <= 1e-10, worst_det, 1e-10))
    return res


def _ou_sampler(ctx: Context) -> StageResult:
    from scipy.stats import kstest, norm

    from .gauss import ou_covariance, ou_sample

    n = int(ctx.p("n_samples", 100_000))
    rng = make_rng(ctx.seed(1))
    tr = ou_covariance(1.0, 1)
    s = ou_sample(np.zeros(2), 1.0, rng, n)
    emp = np.cov(s.T)
    rel = float((np.abs(emp - tr.cov) / np.abs(tr.cov)).max())
    pvals = [float(kstest(s[:, k], norm(0, math.sqrt(tr.cov[k, k])).cdf).pvalue) for k in range(2)]
    res = StageResult()
    res.tables.append(
        Table(
            "ou_sample_covariance",
            ["entry", "exact", "empirical"],
            [[name, tr.cov[i, j], emp[i, j]] for name, i, j in (("xx", 0, 0), ("xv", 0, 1), ("vv", 1, 1))],
        )
    )
    res.verdicts.append(Verdict("ou_sample_covariance", rel < 0.05, rel, 0.05, f"entrywise relative, n={n}"))
    res.verdicts.append(Verdict("ou_ks_marginals", min(pvals) > 0.01, min(pvals), 0.01))
    return res


def _branch(ctx: Context) -> StageResult:
    from .characteristics import BranchSolution, nonuniqueness_run

    alpha = ctx.alpha
    T = float(ctx.p("T_sep", 0.5))
    eps = float(ctx.p("eps", 1e-6))
    dt = float(ctx.p("ode_dt", 1e-3))
    run = nonuniqueness_run(alpha, T, eps, dt)
    b = BranchSolution(alpha)
    tt = np.linspace(0.0, b.valid_until(), 2001)
    resid = float(np.abs(b.residual(tt)).max())
    sep = run.separation()
    stride = max(1, len(run.zero.t) // 500)
    rows = [
        [t, zz[0], zz[1], bz[0], bz[1], ex[0], ex[1], s]
        for t, zz, bz, ex, s in list(zip(run.zero.t, run.zero.z, run.branch.z, run.exact, sep))[::stride]
    ]
    res = StageResult()
    res.tables.append(
        Table(
            "branch",
            ["t", "zero_x", "zero_v", "rk4_x", "rk4_v", "exact_x", "exact_v", "separation"],
            rows,
            ("t", ["separation"], False, True),
        )
    )
    res.verdicts.append(Verdict("branch_residual", resid < 1e-9, resid, 1e-9, f"window [0, {b.valid_until():.4f}]"))
    res.verdicts.append(Verdict("nonuniqueness_separation", float(sep[-1]) > 1e-2, float(sep[-1]), 1e-2, f"t={T}, eps={eps}"))
    return res


def _coalescence(ctx: Context) -> StageResult:
    from .characteristics import coalescing_pair, deterministic_transport_eval, integrate_ode

    alpha = ctx.alpha
    t0 = float(ctx.p("t0", 0.3))
    F = make_drift({"kind": "counterexample", "alpha": alpha})
    p, q = coalescing_pair(alpha, t0)
    ends = integrate_ode(F, np.stack([p.as_array(), q.as_array()]), t0, 1e-4, keep=False).end
    miss = float(np.abs(ends).max())
    n_dir = p.as_array() / np.linalg.norm(p.as_array())
    sigma = float(np.linalg.norm(p.as_array()))

    def f0(z):
        return np.tanh((np.asarray(z) @ n_dir) / sigma)

    asym = float(f0(p.as_array()) - f0(q.as_array()))
    rows, ok = [], True
    for r in ctx.p("radii", [1e-1, 1e-2, 1e-3, 1e-4, 1e-6, 1e-8]):
        probes = np.array([[r, 0.0], [-r, 0.0]])
        vals, flags = deterministic_transport_eval(f0, F, t0, probes)
        gap = float(abs(vals[0] - vals[1]))
        rows.append([r, vals[0], vals[1], gap, int(flags.any())])
        if r >= 1e-3:
            ok = ok and gap >= 0.5 * abs(asym)
    res = StageResult()
    res.tables.append(Table("discontinuity", ["radius", "f_plus", "f_minus", "gap", "flagged"], rows, ("radius", ["gap"], True, False)))
    res.verdicts.append(Verdict("coalescence_endpoint", miss <= 1e-5, miss, 1e-5, f"t0={t0}"))
    res.verdicts.append(Verdict("discontinuity_gap", ok, min(r[3] for r in rows), 0.5 * abs(asym)))
    return res


def _resolvent_oracles(ctx: Context) -> StageResult:
    from .kolmogorov import ResolventConfig, resolvent_apply

    lam = float(ctx.p("lam", 10.0))
    L, n = float(ctx.cfg.numeric["L"]), int(ctx.cfg.numeric["n"])
    cfg = ResolventConfig(lam)
    cases = [
        ("one", lambda z: np.ones(z.shape[:-1]), lambda z: np.ones(z.shape[:-1]) / lam),
        ("v", lambda z: z[..., 1], lambda z: z[..., 1] / lam),
        ("x", lambda z: z[..., 0], lambda z: z[..., 0] / lam + z[..., 1] / lam**2),
    ]
    rows, res = [], StageResult()
    for name, g, exact in cases:
        gf = GridFunction.sample(g, L, (n, n), Boundary.EXTRAPOLATED)
        err = float(np.abs(resolvent_apply(gf, cfg).values - exact(gf.mesh())).max())
        rows.append([name, lam, err])
        res.verdicts.append(Verdict(f"resolvent_{name}", err <= 1e-6, err, 1e-6))
    res.tables.append(Table("resolvent_oracles", ["g", "lam", "sup_error"], rows))
    return res


def _resolvent_drift(ctx: Context) -> StageResult:
    from .kolmogorov import ResolventConfig, resolvent_report, sample_drift, solve_with_drift

    lam = float(ctx.p("lam", 10.0))
    L, n = float(ctx.cfg.numeric["L"]), int(ctx.cfg.numeric["n"])
    proto = GridFunction((L, L), (n, n), np.zeros((n, n)), Boundary.ZERO)
    g = proto.with_values(sample_drift(ctx.F, proto)[..., 0])
    cfg = ResolventConfig(lam)
    fp = solve_with_drift(g, ctx.F, cfg, raise_on_divergence=False)
    rep = resolvent_report(fp, g, cfg)
    res = StageResult()
    res.tables.append(Table("resolvent_report", ["quantity", "value"], [[k, v] for k, v in sorted(rep.items()) if isinstance(v, (int, float))]))
    res.tables.append(Table("picard_ratios", ["iteration", "ratio"], [[k + 1, r] for k, r in enumerate(fp.ratios)], ("iteration", ["ratio"], False, True)))
    res.verdicts.append(Verdict("picard_converged", fp.converged, fp.contraction_estimate, 1.0, f"lam={lam}"))
    return res


def _zvonkin_sweep(ctx: Context) -> StageResult:
    from .kolmogorov import NoAdmissibleLambda, build_zvonkin_U

    num = ctx.cfg.numeric
    try:
        U = build_zvonkin_U(ctx.F, num["lam_sweep"], L=num["L"], n=num["n"], stop_at_first=False)
        sweep, total = U.sweep, U.sup_report["total"]
    except NoAdmissibleLambda as exc:
        sweep, total = exc.report, math.inf
    cols = ["lam", "contraction_estimate", "iterations", "converged", "U_sup", "DU_sup", "total", "DvU_sup", "DxU_sup", "admissible"]
    rows = [[r[c] for c in cols] for r in sweep]
    est = [r["contraction_estimate"] for r in sweep]
    res = StageResult()
    res.tables.append(Table("zvonkin_sweep", cols, rows, ("lam", ["contraction_estimate", "total"], True, True)))
    res.verdicts.append(Verdict("contraction_below_one", min(est) < 1, min(est), 1.0))
    res.verdicts.append(Verdict("contraction_decreasing", all(b < a for a, b in zip(est, est[1:]))))
    res.verdicts.append(Verdict("corrector_certified", total < 0.5, total, 0.5))
    return res


def _holder(ctx: Context) -> StageResult:
    from .diagnostics import holder_exponent_regression

    seps = ctx.p("separations", [1e-3, 3e-3, 1e-2, 3e-2, 1e-1])
    z = ctx.p("starter", [0.0, 0.0])
    num = ctx.cfg.numeric
    out = holder_exponent_regression(
        ctx.F, 2.0, num["T"], seps, ctx.cfg.mc["n_paths"], z, dt=num["dt"], seed=ctx.seed(2), scheme=ctx.scheme, corrector=ctx.corrector()
    )
    res = StageResult()
    res.tables.append(Table("holder", ["separation", "moment"], [[s, m] for s, m in zip(out["separations"], out["moments"])], ("separation", ["moment"], True, True)))
    res.verdicts.append(Verdict("holder_slope", out["slope"] >= 1.7, out["slope"], 1.7, f"se={out['slope_se']:.3g}"))
    return res


def _injectivity(ctx: Context) -> StageResult:
    from .diagnostics import injectivity_margin

    n_pairs = int(ctx.p("n_pairs", 10))
    rng = make_rng(ctx.seed(3))
    z = rng.uniform(-1, 1, (n_pairs, 2))
    y = z + rng.uniform(-1e-2, 1e-2, (n_pairs, 2))
    num = ctx.cfg.numeric
    out = injectivity_margin(
        ctx.F, np.stack([z, y], axis=1), -1.0, num["T"], ctx.cfg.mc["n_paths"], dt=num["dt"], seed=ctx.seed(4), scheme=ctx.scheme, corrector=ctx.corrector()
    )
    res = StageResult()
    res.tables.append(Table("injectivity", ["pair", "margin", "se"], [[j, v, s] for j, (v, s) in enumerate(zip(out["values"], out["se"]))]))
    res.verdicts.append(Verdict("no_collapse", out["collapse_events"] == 0, out["collapse_events"], 0, f"{n_pairs} pairs x {out['n_paths']} paths"))
    return res


def _deterministic_collapse(ctx: Context) -> StageResult:
    from .characteristics import coalescing_pair, integrate_ode

    t0 = float(ctx.p("t0", 0.3))
    p, q = coalescing_pair(ctx.alpha, t0)
    F = make_drift({"kind": "counterexample", "alpha": ctx.alpha})
    ends = integrate_ode(F, np.stack([p.as_array(), q.as_array()]), t0, 1e-4, keep=False).end
    gap = float(np.linalg.norm(ends[0] - ends[1]))
    res = StageResult()
    res.tables.append(Table("deterministic_pair", ["initial_separation", "final_separation"], [[float(np.linalg.norm(p.as_array() - q.as_array())), gap]]))
    res.verdicts.append(Verdict("deterministic_collapse", gap < 1e-6, gap, 1e-6))
    return res


def _girsanov(ctx: Context) -> StageResult:
    from .diagnostics import estimates_agree, girsanov_mean, weak_expectation_direct, weak_expectation_reweighted
    from .transport import Bump

    num = ctx.cfg.numeric
    z = np.asarray(ctx.p("starter", [0.0, 0.0]), dtype=float)
    n_mean = int(ctx.p("n_mean", 100_000))
    n_weak = int(ctx.p("n_weak", 10_000))
    m = girsanov_mean(ctx.F, z, num["T"], num["dt"], n_mean, ctx.seed(5))
    h = Bump((0.5, 0.5), 1.5)
    rw = weak_expectation_reweighted(h, ctx.F, num["T"], n_weak, z, num["dt"], ctx.seed(6))
    dr = weak_expectation_direct(h, ctx.F, num["T"], n_weak, z, num["dt"], ctx.seed(7))
    res = StageResult()
    res.tables.append(
        Table(
            "girsanov",
            ["estimator", "n_paths", "value", "se"],
            [["girsanov_mean", n_mean, m.value, m.se], ["reweighted", n_weak, rw["estimate"].value, rw["estimate"].se], ["direct", n_weak, dr.value, dr.se]],
        )
    )
    res.verdicts.append(Verdict("girsanov_mean_one", abs(m.value - 1) <= m.band, abs(m.value - 1), m.band))
    res.verdicts.append(Verdict("weak_estimates_agree", estimates_agree(rw["estimate"], dr), abs(rw["estimate"].value - dr.value), 3 * math.hypot(rw["estimate"].se, dr.se)))
    res.verdicts.append(Verdict("weights_not_degenerate", not rw["degenerate"], rw["ess"], 0.1 * n_weak))
    return res


def _derivative(ctx: Context) -> StageResult:
    from .sde import difference_quotient, linear_flow_jacobian

    num = ctx.cfg.numeric
    T, n_paths = float(num["T"]), int(ctx.cfg.mc["n_paths"])
    dt = float(ctx.p("sde_dt", 1e-3))
    z = np.asarray(ctx.p("starter", [0.3, -0.2]), dtype=float)
    hs = ctx.p("hs", [1e-1, 1e-2, 1e-3, 1e-4])
    inc = brownian_increments(ctx.seed(8), T, dt, 1, n_paths)
    rows, res = [], StageResult()
    for i in (0, 1):
        sups = []
        for h in hs:
            th = difference_quotient(ctx.F, z, h, i, inc, dt, ctx.scheme, ctx.corrector(), T)
            m2 = float(np.mean(np.sum(th**2, axis=-1)))
            sups.append(m2)
            rows.append([i, h, m2])
        var = max(sups) / min(sups) - 1
        res.verdicts.append(Verdict(f"theta_stable_e{i}", var < 0.5, var, 0.5))
    free = make_drift({"kind": "zero"})
    one = brownian_increments(ctx.seed(9), T, dt, 1, 1)
    err = 0.0
    for i in (0, 1):
        th = difference_quotient(free, z, 1e-3, i, one, dt, "em", None, T)[0]
        err = max(err, float(np.abs(th - linear_flow_jacobian(T)[:, i]).max()))
    res.tables.append(Table("theta_moments", ["direction", "h", "E_theta_sq"], rows, None))
    res.verdicts.append(Verdict("theta_free_oracle", err <= 1e-12, err, 1e-12))
    return res


def _sharp_datum(scale: float = 0.05):
    def f0(z):
        z = np.asarray(z)
        return np.tanh(z[..., 0] / scale)

    return f0


def _spde_free(ctx: Context) -> StageResult:
    from .transport import box_lattice, free_transport_closed_form, spde_solve

    t, dt = 0.5, 1e-2
    path = NoisePath(ctx.seed(10), t, dt, 1)
    m = int(ctx.p("query_n", 33))
    q = box_lattice([-1, -1], [1, 1], m)

    def f0(z):
        return np.exp(-np.sum(np.asarray(z) ** 2, axis=-1))

    num = spde_solve(f0, make_drift({"kind": "zero"}), t, q, path, dt).values[0]
    exact = free_transport_closed_form(f0, t, q, path, dt)
    err = float(np.abs(num - exact).max())
    spacing = 2.0 / (m - 1)
    res = StageResult()
    res.tables.append(Table("spde_free", ["query_n", "sup_error", "starter_spacing"], [[m, err, spacing]]))
    res.verdicts.append(Verdict("spde_free_closed_form", err < 10 * spacing, err, 10 * spacing))
    return res


def _weak_form(ctx: Context) -> StageResult:
    from .transport import test_catalog, weak_form_residual

    T = float(ctx.p("weak_T", 0.5))
    n_paths = int(ctx.p("weak_paths", 64))
    dts = ctx.p("weak_dts", [0.125, 0.0625, 0.03125])
    paths = [NoisePath(ctx.seed(11), T, min(dts) / 4, 1, index=j) for j in range(n_paths)]

    def f0(z):
        return np.exp(-np.sum(np.asarray(z) ** 2, axis=-1))

    rms = [weak_form_residual(f0, ctx.F, T, test_catalog(1), paths, dt)["rms"] for dt in dts]
    slope = float(np.polyfit(np.log(dts), np.log(rms), 1)[0])
    res = StageResult()
    res.tables.append(Table("weak_form", ["dt", "rms"], [[a, b] for a, b in zip(dts, rms)], ("dt", ["rms"], True, True)))
    res.verdicts.append(Verdict("weak_form_slope", slope >= 0.4 and all(b < a for a, b in zip(rms, rms[1:])), slope, 0.4))
    return res


def _sobolev(ctx: Context) -> StageResult:
    from .transport import box_lattice, sobolev_diagnostic, spde_solve

    t0 = float(ctx.p("t0", 0.3))
    n_paths = int(ctx.p("sobolev_paths", 16))
    dt = float(ctx.p("sobolev_dt", 1e-2))
    times = [0.5 * t0, t0, 1.5 * t0]
    q = box_lattice([-1, -1], [1, 1], 65)
    paths = [NoisePath(ctx.seed(12), 1.5 * t0, dt, 1, index=j) for j in range(n_paths)]
    f0 = _sharp_datum()
    meds = [sobolev_diagnostic(spde_solve(f0, ctx.F, t, q, paths, dt, scheme=ctx.scheme, corrector=ctx.corrector()))["median"] for t in times]
    res = StageResult()
    res.tables.append(Table("sobolev_noisy", ["t", "median_W14"], [[a, b] for a, b in zip(times, meds)], ("t", ["median_W14"], False, False)))
    var = max(meds) / min(meds)
    res.verdicts.append(Verdict("noisy_W14_bounded", var < 2.0, var, 2.0))
    return res


def deterministic_gradient_growth(alpha: float, t0: float, radius: float = 1e-2, ns=(17, 33, 65), dt: float = 1e-4) -> list[tuple[int, float]]:
    """Sup of the grid gradient of the deterministic solution on lattices of
    the box [-radius, radius]^2 around the origin at time t0."""
    from .characteristics import coalescing_pair, deterministic_transport_eval
    from .transport import box_lattice, sup_gradient

    F = make_drift({"kind": "counterexample", "alpha": alpha})
    p, _ = coalescing_pair(alpha, t0)
    pa = p.as_array()
    nrm = pa / np.linalg.norm(pa)
    sigma = float(np.linalg.norm(pa))

    def f0(z):
        return np.tanh((np.asarray(z) @ nrm) / sigma)

    out = []
    for n in ns:
        q = box_lattice([-radius, -radius], [radius, radius], n)
        vals, _ = deterministic_transport_eval(f0, F, t0, q.reshape(-1, 2), dt)
        h = 2 * radius / (n - 1)
        out.append((int(n), sup_gradient(vals.reshape(n, n), [h, h])))
    return out


def _det_gradient(ctx: Context) -> StageResult:
    growth = deterministic_gradient_growth(ctx.alpha, float(ctx.p("t0", 0.3)))
    ratio = growth[-1][1] / growth[0][1]
    res = StageResult()
    res.tables.append(Table("deterministic_gradient", ["n", "sup_gradient"], [list(r) for r in growth], ("n", ["sup_gradient"], True, True)))
    res.verdicts.append(Verdict("deterministic_gradient_growth", ratio > 10, ratio, 10.0, "two lattice halvings"))
    return res


def _energy(ctx: Context) -> StageResult:
    from .transport import energy_uniqueness_check

    times = ctx.p("times", [0.25, 0.5, 1.0])
    n_paths = int(ctx.p("energy_paths", 4))
    dt = float(ctx.p("energy_dt", 1e-3))
    zero = energy_uniqueness_check(ctx.F, times, 1, dt, seed=ctx.seed(13), zero_datum=True)
    pert = energy_uniqueness_check(ctx.F, times, n_paths, dt, seed=ctx.seed(13))
    rows = [[t, a, b, c, zz] for t, a, b, c, zz in zip(times, pert["ratio_mean"], pert["ratio_max"], pert["bound"], zero["g_hat"])]
    res = StageResult()
    res.tables.append(Table("energy", ["t", "ratio_mean", "ratio_max", "bound", "g_hat_zero"], rows, ("t", ["ratio_mean", "ratio_max", "bound"], False, False)))
    zmax = float(np.max(zero["g_hat"]))
    res.verdicts.append(Verdict("zero_datum_stays_zero", zmax <= 1e-20, zmax, 1e-20))
    res.verdicts.append(Verdict("energy_bound", pert["within_bound"], float(np.max(pert["ratio_max"] / pert["bound"])), 1.1))
    return res


def pure_mode_ratios(ks=(1, 2, 4), ss=(0.5, 0.7), p: int = 8, n: int = 256) -> list[dict]:
    """Bessel seminorm over L^p norm, and the Besov seminorm relative to k = 1,
    for cos(k x) on the periodic box [-pi, pi)."""
    from .norms import BoxArray, NormParams, besov_seminorm, bessel_norm

    rows = []
    for s in ss:
        prm = NormParams(s, p)
        base = None
        for k in ks:
            x = -math.pi + 2 * math.pi * np.arange(n) / n
            f = BoxArray(np.cos(k * x), (math.pi,))
            bn = bessel_norm(f, prm)
            bs = besov_seminorm(f, prm)
            base = bs if base is None else base
            rows.append({"s": s, "k": k, "bessel_ratio": bn["seminorm"] / bn["lp"], "besov_ratio": bs / base, "expected": float(k) ** s})
    return rows


def non_decaying_drift() -> DriftField:
    return DriftField.from_callable(lambda z: np.sign(np.asarray(z)[..., :1]), d=1, label="sign(x), no decay")


def _norms(ctx: Context) -> StageResult:
    from .norms import hypothesis_check

    rows = pure_mode_ratios()
    worst = max(max(abs(r["bessel_ratio"] / r["expected"] - 1), abs(r["besov_ratio"] / r["expected"] - 1)) for r in rows)
    n = int(ctx.p("norm_n", 256))
    good = hypothesis_check(ctx.F, n=n)
    bad = hypothesis_check(non_decaying_drift(), n=n)
    res = StageResult()
    res.tables.append(Table("pure_modes", ["s", "k", "bessel_ratio", "besov_ratio", "expected"], [[r[c] for c in ("s", "k", "bessel_ratio", "besov_ratio", "expected")] for r in rows]))
    res.tables.append(
        Table(
            "hypothesis_check",
            ["drift", "value", "refine_change", "box_change", "verdict"],
            [["configured", good["value"], good["refine_change"], good["box_change"], good["verdict"]], ["non_decaying", bad["value"], bad["refine_change"], bad["box_change"], bad["verdict"]]],
        )
    )
    res.verdicts.append(Verdict("pure_mode_scaling", worst < 0.05, worst, 0.05))
    res.verdicts.append(Verdict("hypothesis_pass", good["verdict"] == "PASS"))
    res.verdicts.append(Verdict("non_decaying_fails", bad["verdict"] == "FAIL"))
    return res


def _mollify(ctx: Context) -> StageResult:
    from .diagnostics import is_decreasing_to_floor, mollified_convergence

    ns = ctx.p("levels", [2, 3, 4, 5, 6, 7])
    widths = [2.0**-k for k in ns]
    dt = float(ctx.p("sde_dt", 1e-3))
    starters = ctx.p("starters", [[0.0, 0.0], [0.3, -0.2], [-0.5, 0.5]])
    n_paths = int(ctx.p("mollify_paths", 200))
    out = mollified_convergence(ctx.F, widths, starters, float(ctx.cfg.numeric["T"]), n_paths, dt, ctx.seed(14), keep_every=10)
    floor = float(ctx.p("floor", dt))
    res = StageResult()
    res.tables.append(Table("mollified", ["level", "width", "discrepancy"], [[k, w, e] for k, w, e in zip(ns, widths, out["discrepancy"])], ("width", ["discrepancy"], True, True)))
    res.verdicts.append(Verdict("mollified_decreasing", is_decreasing_to_floor(out["discrepancy"], floor), out["discrepancy"][-1], floor))
    return res


EXPERIMENTS: dict[str, list[tuple[str, Callable[[Context], StageResult]]]] = {
    "ou-check": [("table", _ou_table), ("sampler", _ou_sampler)],
    "counterexample": [("branch", _branch), ("coalescence", _coalescence)],
    "resolvent": [("oracles", _resolvent_oracles), ("drift", _resolvent_drift)],
    "zvonkin": [("sweep", _zvonkin_sweep)],
    "flow-holder": [("holder", _holder), ("injectivity", _injectivity), ("deterministic", _deterministic_collapse)],
    "girsanov": [("girsanov", _girsanov)],
    "derivative": [("derivative", _derivative)],
    "spde-regularity": [("free", _spde_free), ("weak_form", _weak_form), ("sobolev", _sobolev), ("det_gradient", _det_gradient)],
    "uniqueness": [("energy", _energy)],
    "norms": [("norms", _norms)],
    "mollify": [("mollify", _mollify)],
}
assert set(EXPERIMENTS) == set(REGISTRY)


# ---------------------------------------------------------------------------
# artifacts


def pool_size() -> int:
    raw = os.environ.get("KLAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise KlabError(f"KLAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(4, os.cpu_count() or 1))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, table: Table, echo: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config: {echo}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_cell(x) for x in row])


def _versions() -> dict:
    import scipy

    return {"klab": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def plot_csv(csv_path: Path, spec: tuple, png_path: Path) -> None:
    """Static line plot of columns of an emitted CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xcol, ycols, logx, logy = spec
    with open(csv_path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    x = np.array([float(r[xcol]) for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c in ycols:
        ax.plot(x, [float(r[c]) for r in rows], marker="o", ms=3, label=c)
    ax.set_xscale("log" if logx else "linear")
    ax.set_yscale("log" if logy else "linear")
    ax.set_xlabel(xcol)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def run_experiment(cfg: ExperimentConfig, scheme: str = "em", plot: bool = False, out_dir: str | Path | None = None) -> Report:
    """Run every stage of ``cfg.name`` and write CSV tables, a verdict JSON
    file and a manifest to the output directory."""
    if cfg.name not in EXPERIMENTS:
        raise KlabError(f"unknown experiment {cfg.name!r}")
    ctx = Context(cfg, scheme)
    workers = pool_size()
    out = Path(out_dir if out_dir is not None else cfg.outputs["dir"])
    out.mkdir(parents=True, exist_ok=True)
    stages = EXPERIMENTS[cfg.name]
    if ctx.scheme.value == "zvonkin":
        ctx.corrector()  # build once before the stages fan out

    def run(stage):
        name, fn = stage
        try:
            return fn(ctx)
        except KlabError as exc:
            raise StageError(name, exc) from exc
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise StageError(name, exc) from exc

    with ThreadPoolExecutor(max_workers=min(workers, len(stages))) as pool:
        results = list(pool.map(run, stages))

    echo = json.dumps(cfg.to_dict(), sort_keys=True)
    chash = config_hash(cfg.to_dict())
    files, verdicts, plots = {}, {}, []
    for (stage, _), res in zip(stages, results):
        for tab in res.tables:
            path = out / f"{tab.name}.csv"
            _write_csv(path, tab, echo)
            files[path.name] = _sha(path)
            if plot and tab.plot is not None:
                plots.append((path, tab.plot))
        for v in res.verdicts:
            verdicts[v.name] = dict(v.to_dict(), stage=stage)
    vpath = out / "verdicts.json"
    doc = {"experiment": cfg.name, "scheme": ctx.scheme.value, "config": cfg.to_dict(), "config_hash": chash, "seed": cfg.seed, "verdicts": verdicts}
    vpath.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    files[vpath.name] = _sha(vpath)
    (out / "config.json").write_text(serialize(cfg))
    files["config.json"] = _sha(out / "config.json")
    images = []
    for path, spec in plots:
        png = path.with_suffix(".png")
        plot_csv(path, spec, png)
        images.append(png.name)
    manifest = {
        "experiment": cfg.name,
        "scheme": ctx.scheme.value,
        "config_hash": chash,
        "seed": cfg.seed,
        "versions": _versions(),
        "files": dict(sorted(files.items())),
        "plots": sorted(images),
        "all_passed": all(v["passed"] for v in verdicts.values()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return Report(cfg.name, out, verdicts, files, manifest)
