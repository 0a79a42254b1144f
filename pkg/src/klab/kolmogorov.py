"""Resolvent of the free kinetic operator, the drift perturbation T_lambda, the
fixed-point solve psi = G_lambda (I - T_lambda)^{-1} g and the Zvonkin corrector.

All norms reported here are grid norms: midpoint quadrature over the box.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Boundary, DriftField, GridFunction, KlabError, as_phase_array
from .gauss import semigroup_apply

TAIL_BOUND = 1e-10


class DivergenceError(KlabError):
    """Picard iteration for (I - T_lambda)^{-1} is not contracting."""


class NoAdmissibleLambda(KlabError):
    def __init__(self, message: str, report: list[dict]):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ResolventConfig:
    lam: float
    t_max: float | None = None
    n_quad: int = 40
    quad_rule: str = "loguniform"
    t_min: float = 1e-4

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise KlabError(f"resolvent parameter must be positive, got {self.lam}")
        if self.quad_rule not in ("loguniform", "gausslaguerre"):
            raise KlabError(f"unknown quadrature rule {self.quad_rule!r}")
        if self.t_max is None:
            object.__setattr__(self, "t_max", (-math.log(TAIL_BOUND) + 0.5) / self.lam)
        if self.quad_rule == "loguniform" and math.exp(-self.lam * self.t_max) >= TAIL_BOUND:
            raise KlabError(
                f"t_max={self.t_max:g} leaves exp(-lambda t_max) >= {TAIL_BOUND:g}; increase t_max"
            )

    def with_lam(self, lam: float) -> "ResolventConfig":
        return ResolventConfig(lam, None, self.n_quad, self.quad_rule, self.t_min)


def _hat_weights(nodes: np.ndarray, lam: float) -> np.ndarray:
    # exact integrals of exp(-lam t) against the piecewise-linear hat basis
    w = np.zeros_like(nodes)
    a, b = nodes[:-1], nodes[1:]
    mu = lam * (b - a)
    ea = np.exp(-lam * a)
    small = mu < 1e-4
    em = np.exp(-mu)
    # rising part: int_0^h e^{-lam s} s/h ds, falling part: int_0^h e^{-lam s}(h-s)/h ds
    rise = np.where(small, 0.5 - mu / 3.0 + mu**2 / 8.0, (-np.expm1(-mu) - mu * em) / np.where(small, 1.0, mu) ** 2)
    total = np.where(small, 1.0 - mu / 2.0 + mu**2 / 6.0, -np.expm1(-mu) / np.where(small, 1.0, mu))
    fall = total - rise
    scale = ea * (b - a)
    w[:-1] += scale * fall
    w[1:] += scale * rise
    # tail beyond the last node, with P_t g frozen at its last value
    w[-1] += math.exp(-lam * nodes[-1]) / lam
    return w


def quadrature(cfg: ResolventConfig) -> tuple[np.ndarray, np.ndarray]:
    """Time nodes and weights approximating int_0^inf e^{-lam t} h(t) dt.

    loguniform: node t=0 plus log-spaced nodes on [t_min, t_max] with product
    integration weights, exact whenever h is linear in t.
    gausslaguerre: exact for polynomial h up to degree 2 n_quad - 1.
    """
    if cfg.quad_rule == "gausslaguerre":
        u, w = np.polynomial.laguerre.laggauss(cfg.n_quad)
        return u / cfg.lam, w / cfg.lam
    nodes = np.concatenate([[0.0], np.geomspace(cfg.t_min, cfg.t_max, cfg.n_quad)])
    return nodes, _hat_weights(nodes, cfg.lam)


def resolvent_apply(g: GridFunction, cfg: ResolventConfig) -> GridFunction:
    """G_lambda g = int_0^inf e^{-lambda t} P_t g dt by time quadrature."""
    nodes, weights = quadrature(cfg)
    acc = np.zeros_like(g.values)
    for t, w in zip(nodes, weights):
        acc += w * semigroup_apply(g, float(t), warn=False).values
    return g.with_values(acc)


# ---------------------------------------------------------------------------
# lattice derivatives


def derivative_along(a: np.ndarray, axis: int, h: float, boundary: Boundary) -> np.ndarray:
    """First derivative along ``axis``: spectral when periodic, otherwise
    fourth-order central differences with one-sided stencils at the ends."""
    n = a.shape[axis]
    if boundary is Boundary.PERIODIC:
        xi = 2 * np.pi * np.fft.rfftfreq(n, d=h)
        if n % 2 == 0:
            xi[-1] = 0.0
        shape = [1] * a.ndim
        shape[axis] = xi.size
        return np.fft.irfft(np.fft.rfft(a, axis=axis) * (1j * xi.reshape(shape)), n=n, axis=axis)
    b = np.moveaxis(a, axis, -1)
    out = np.empty_like(b)
    out[..., 2:-2] = (-b[..., 4:] + 8 * b[..., 3:-1] - 8 * b[..., 1:-3] + b[..., :-4]) / (12 * h)
    out[..., 0] = (-25 * b[..., 0] + 48 * b[..., 1] - 36 * b[..., 2] + 16 * b[..., 3] - 3 * b[..., 4]) / (12 * h)
    out[..., 1] = (-3 * b[..., 0] - 10 * b[..., 1] + 18 * b[..., 2] - 6 * b[..., 3] + b[..., 4]) / (12 * h)
    out[..., -1] = (25 * b[..., -1] - 48 * b[..., -2] + 36 * b[..., -3] - 16 * b[..., -4] + 3 * b[..., -5]) / (12 * h)
    out[..., -2] = (3 * b[..., -1] + 10 * b[..., -2] - 18 * b[..., -3] + 6 * b[..., -4] - b[..., -5]) / (12 * h)
    return np.moveaxis(out, -1, axis)


def lattice_gradient(f: GridFunction, block: str = "all") -> np.ndarray:
    """Gradient of a scalar lattice function; trailing axis indexes the
    requested coordinates (``"x"``, ``"v"`` or ``"all"``)."""
    d = f.d
    idx = {"x": range(d), "v": range(d, 2 * d), "all": range(2 * d)}[block]
    h = f.spacing
    return np.stack([derivative_along(f.values, k, h[k], f.boundary) for k in idx], axis=-1)


def grid_gradient(f: GridFunction, axes: str = "v") -> GridFunction:
    if f.is_vector:
        raise KlabError("grid_gradient expects a scalar lattice function")
    return f.with_values(lattice_gradient(f, axes))


# ---------------------------------------------------------------------------
# drift perturbation and fixed point


def sample_drift(F: DriftField, grid: GridFunction) -> np.ndarray:
    return np.asarray(F(grid.mesh()), dtype=float)


def t_lambda_apply(F: DriftField | np.ndarray, f: GridFunction, cfg: ResolventConfig) -> GridFunction:
    """T_lambda f = F . D_v (G_lambda f)."""
    Fv = sample_drift(F, f) if isinstance(F, DriftField) else F
    if not np.any(Fv):
        return f.with_values(np.zeros_like(f.values))
    grad = lattice_gradient(resolvent_apply(f, cfg), "v")
    return f.with_values(np.sum(Fv * grad, axis=-1))


@dataclass
class FixedPointResult:
    psi: GridFunction
    f: GridFunction
    iterations: int
    contraction_estimate: float
    ratios: list[float] = field(default_factory=list)
    converged: bool = True


def solve_with_drift(
    g: GridFunction,
    F: DriftField,
    cfg: ResolventConfig,
    tol: float = 1e-8,
    max_iter: int = 200,
    warmup: int = 1,
    raise_on_divergence: bool = True,
) -> FixedPointResult:
    """Solve lambda psi - L psi = g with the drift term included.

    Picard iteration f <- g + T_lambda f, then psi = G_lambda f. The
    contraction estimate is the largest ratio of successive update norms
    after ``warmup`` ratios (all ratios if fewer are available).
    """
    Fv = sample_drift(F, g)
    f = g
    prev_diff = None
    ratios: list[float] = []
    it = 0
    converged = False
    above = 0
    floor = 1e-13 * max(1.0, float(np.abs(g.values).max()))
    for it in range(1, max_iter + 1):
        f_new = g.with_values(g.values + t_lambda_apply(Fv, f, cfg).values)
        diff = float(np.abs(f_new.values - f.values).max())
        f = f_new
        if prev_diff is not None and prev_diff > floor:
            ratios.append(diff / prev_diff)
            if len(ratios) > warmup and ratios[-1] >= 1.0:
                above += 1
                if above >= 3:
                    break
        if diff <= tol:
            converged = True
            break
        prev_diff = diff
    usable = ratios[warmup:] if len(ratios) > warmup else ratios
    est = max(usable) if usable else 0.0
    if not converged and (est >= 1.0 or raise_on_divergence):
        if raise_on_divergence:
            raise DivergenceError(
                f"Picard iteration not contracting at lambda={cfg.lam:g} (estimate {est:.3f}); "
                "lambda is below the admissible regime"
            )
    psi = resolvent_apply(f, cfg)
    return FixedPointResult(psi, f, it, est, ratios, converged)


def grid_lp(values: np.ndarray, cell_volume: float, p: float) -> float:
    if math.isinf(p):
        return float(np.abs(values).max())
    return float((np.sum(np.abs(values) ** p) * cell_volume) ** (1.0 / p))


def resolvent_report(res: FixedPointResult, g: GridFunction, cfg: ResolventConfig, p: float = 8.0) -> dict:
    psi = res.psi
    vol = psi.cell_volume
    d = psi.d
    grad = lattice_gradient(psi, "all")
    dv, dx = grad[..., d:], grad[..., :d]
    v = psi.mesh()[..., d:]
    dvv = np.stack([derivative_along(dv[..., k], d + k, psi.spacing[d + k], psi.boundary) for k in range(d)], -1)
    lam = cfg.lam
    return {
        "lambda": lam,
        "contraction_estimate": res.contraction_estimate,
        "iterations": res.iterations,
        "converged": res.converged,
        "p": p,
        "norms": {
            "lam_psi_p": lam * grid_lp(psi.values, vol, p),
            "sqrt_lam_Dv_psi_p": math.sqrt(lam) * grid_lp(dv, vol, p),
            "Dvv_psi_p": grid_lp(dvv, vol, p),
            "v_Dx_psi_p": grid_lp(np.sum(v * dx, axis=-1), vol, p),
            "g_p": grid_lp(g.values, vol, p),
            "psi_sup": grid_lp(psi.values, vol, math.inf),
            "Dx_psi_p": grid_lp(dx, vol, p),
            "Dx_psi_sup": grid_lp(dx, vol, math.inf),
            "Dv_psi_sup": grid_lp(dv, vol, math.inf),
        },
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Zvonkin corrector


@dataclass(eq=False)
class ZvonkinCorrector:
    """U = (0, u~) solving lambda U - L U = B with B = (0, F), on a lattice."""

    U: GridFunction
    DU: np.ndarray
    lam: float
    sup_report: dict
    sweep: list[dict] = field(default_factory=list)
    _interp: tuple | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        total = self.sup_report["U_sup"] + self.sup_report["DU_sup"]
        if not total < 0.5:
            raise KlabError(f"corrector not contractive: |U|+|DU| = {total:.3f} >= 1/2")

    @property
    def d(self) -> int:
        return self.U.d

    @property
    def lip(self) -> float:
        return self.sup_report["DU_sup"]

    def _interpolators(self):
        if self._interp is None:
            from scipy.interpolate import RegularGridInterpolator

            axes = self.U.axes()
            n2 = 2 * self.d
            iu = RegularGridInterpolator(axes, self.U.values, bounds_error=False, fill_value=0.0)
            idu = RegularGridInterpolator(
                axes, self.DU.reshape(self.DU.shape[:n2] + (n2 * n2,)), bounds_error=False, fill_value=0.0
            )
            self._interp = (iu, idu)
        return self._interp

    def inside(self, z) -> np.ndarray:
        z = as_phase_array(z)
        L = np.asarray(self.U.L)
        upper = L - np.asarray(self.U.spacing)
        return np.all((z >= -L) & (z <= upper), axis=-1)

    def U_at(self, z) -> np.ndarray:
        z = as_phase_array(z)
        iu, _ = self._interpolators()
        return iu(z.reshape(-1, z.shape[-1])).reshape(z.shape)

    def DU_at(self, z) -> np.ndarray:
        z = as_phase_array(z)
        _, idu = self._interpolators()
        n2 = z.shape[-1]
        return idu(z.reshape(-1, n2)).reshape(z.shape[:-1] + (n2, n2))

    @classmethod
    def from_function(cls, U_func, DU_func, L, n, lam: float = 0.0) -> "ZvonkinCorrector":
        """Corrector sampled from closed forms (used for synthetic checks)."""
        Ug = GridFunction.sample(U_func, L, n, Boundary.ZERO)
        DU = np.asarray(DU_func(Ug.mesh()), dtype=float)
        rep = _sup_report(Ug.values, DU)
        return cls(Ug, DU, lam, rep)


def _sup_report(U: np.ndarray, DU: np.ndarray) -> dict:
    U_sup = float(np.linalg.norm(U, axis=-1).max())
    DU_sup = float(np.linalg.norm(DU, ord=2, axis=(-2, -1)).max())
    return {"U_sup": U_sup, "DU_sup": DU_sup, "total": U_sup + DU_sup}


def build_zvonkin_U(
    F: DriftField,
    lam_sweep: Sequence[float] = (5.0, 10.0, 20.0, 40.0, 80.0),
    L: float = 8.0,
    n: int = 256,
    n_quad: int = 40,
    quad_rule: str = "loguniform",
    tol: float = 1e-8,
    stop_at_first: bool = True,
) -> ZvonkinCorrector:
    """Solve lambda u~ - L u~ = F componentwise and pick the smallest swept
    lambda with sup|U| + sup|DU| < 1/2 on the lattice."""
    d = F.d
    Lt, nt = (float(L),) * (2 * d), (int(n),) * (2 * d)
    proto = GridFunction(Lt, nt, np.zeros(nt), Boundary.ZERO)
    Fv = sample_drift(F, proto)
    sweep: list[dict] = []
    chosen = None
    for lam in sorted(lam_sweep):
        cfg = ResolventConfig(float(lam), n_quad=n_quad, quad_rule=quad_rule)
        comps, iters, est = [], 0, 0.0
        for j in range(d):
            g = proto.with_values(Fv[..., j])
            res = solve_with_drift(g, F, cfg, tol=tol, raise_on_divergence=False)
            comps.append(res.psi.values)
            iters = max(iters, res.iterations)
            est = max(est, res.contraction_estimate)
            converged = res.converged
        u = np.stack(comps, axis=-1)
        U = np.concatenate([np.zeros_like(u), u], axis=-1)
        DU = np.zeros(nt + (2 * d, 2 * d))
        for j in range(d):
            DU[..., d + j, :] = lattice_gradient(proto.with_values(u[..., j]), "all")
        rep = _sup_report(U, DU)
        Dv = DU[..., d:, d:]
        rep.update(
            lam=float(lam),
            contraction_estimate=est,
            iterations=iters,
            converged=bool(converged),
            DvU_sup=float(np.abs(Dv).max()),
            DxU_sup=float(np.abs(DU[..., d:, :d]).max()),
            admissible=bool(converged and rep["total"] < 0.5),
        )
        sweep.append(rep)
        if rep["admissible"] and chosen is None:
            chosen = (float(lam), U, DU, rep)
            if stop_at_first:
                break
    if chosen is None:
        raise NoAdmissibleLambda(
            "no swept lambda achieves sup|U| + sup|DU| < 1/2: "
            + ", ".join(f"lambda={r['lam']:g}: {r['total']:.3f}" for r in sweep),
            sweep,
        )
    lam, U, DU, rep = chosen
    return ZvonkinCorrector(proto.with_values(U), DU, lam, rep, sweep)
