"""Grid versions of the Bessel-potential, Besov, mixed and X_{p,s} norms.

Every norm is box-truncated and evaluated with the midpoint rule on the
lattice, so "finite" always means finite on the stated box. Functions accept
either a :class:`GridFunction` or a :class:`BoxArray` (a plain array on a
box, any number of axes).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Boundary, DriftField, GridFunction, KlabError, lattice_axes
from .kolmogorov import derivative_along

EVEN_P = (2, 4, 6, 8, 10)

# numpy 2 renamed trapz
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class NormDomainError(KlabError, ValueError):
    pass


@dataclass(frozen=True)
class NormParams:
    s: float
    p: int = 8
    q: int | None = None

    def __post_init__(self) -> None:
        if self.s < 0:
            raise NormDomainError(f"smoothness must be >= 0, got {self.s}")
        if self.p not in EVEN_P:
            raise NormDomainError(f"p must be one of {EVEN_P}, got {self.p}")
        if self.q is not None and self.q < 2:
            raise NormDomainError(f"q must be >= 2, got {self.q}")

    @property
    def q_eff(self) -> int:
        return self.p if self.q is None else self.q


@dataclass(frozen=True, eq=False)
class BoxArray:
    """Values on the lattice -L_k + j 2L_k/n_k of a box (any dimension)."""

    values: np.ndarray
    L: tuple[float, ...]
    boundary: Boundary = Boundary.PERIODIC

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        L = tuple(float(a) for a in np.broadcast_to(np.asarray(self.L, dtype=float), (v.ndim,)))
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "boundary", Boundary.parse(self.boundary))

    @property
    def n(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(2 * a / m for a, m in zip(self.L, self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list[np.ndarray]:
        return lattice_axes(self.L, self.n)

    @classmethod
    def sample(cls, func, L, n, boundary=Boundary.PERIODIC) -> "BoxArray":
        n = tuple(np.atleast_1d(n).astype(int))
        L = tuple(np.broadcast_to(np.asarray(L, dtype=float), (len(n),)))
        axes = lattice_axes(L, n)
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return cls(np.asarray(func(mesh), dtype=float), L, boundary)


def _box(f) -> BoxArray:
    if isinstance(f, BoxArray):
        return f
    if isinstance(f, GridFunction):
        if f.is_vector:
            raise NormDomainError("norms take scalar lattice functions; pass components separately")
        return BoxArray(f.values, f.L, f.boundary)
    raise NormDomainError("expected a BoxArray or GridFunction")


def lp_norm(f, p: float) -> float:
    b = _box(f)
    if math.isinf(p):
        return float(np.abs(b.values).max())
    return float((np.sum(np.abs(b.values) ** p) * b.cell_volume) ** (1.0 / p))


def _frequencies(b: BoxArray, axes: Sequence[int]) -> list[np.ndarray]:
    return [2 * np.pi * np.fft.fftfreq(b.n[k], d=b.spacing[k]) for k in axes]


def fourier_power(values: np.ndarray, box: BoxArray, s: float, axes: Sequence[int]) -> np.ndarray:
    """F^{-1}[|xi|^s F f] over the given axes with box-consistent frequencies."""
    if s == 0:
        return values.copy()
    xis = _frequencies(box, axes)
    mag2 = 0.0
    for j, (k, xi) in enumerate(zip(axes, xis)):
        shape = [1] * values.ndim
        shape[k] = xi.size
        mag2 = mag2 + xi.reshape(shape) ** 2
    spec = np.fft.fftn(values, axes=axes) * np.sqrt(mag2) ** s
    return np.real(np.fft.ifftn(spec, axes=axes))


def bessel_norm(f, params: NormParams) -> dict:
    """||f||_p, the seminorm ||F^{-1}[|xi|^s F f]||_p and their sum."""
    b = _box(f)
    if b.boundary is not Boundary.PERIODIC:
        raise NormDomainError("Bessel norms need periodic lattice data (zero extension aliases)")
    base = lp_norm(b, params.p)
    semi = lp_norm(BoxArray(fourier_power(b.values, b, params.s, range(b.values.ndim)), b.L), params.p)
    return {"lp": base, "seminorm": semi, "total": base + semi, "s": params.s, "p": params.p, "box": list(b.L), "n": list(b.n)}


# ---------------------------------------------------------------------------
# Besov


def _shift(values: np.ndarray, box: BoxArray, h: np.ndarray) -> np.ndarray:
    """f(. + h): spectral phase shift when periodic, linear interpolation with
    zero fill otherwise."""
    if box.boundary is Boundary.PERIODIC:
        xis = _frequencies(box, range(values.ndim))
        phase = 0.0
        for k, xi in enumerate(xis):
            shape = [1] * values.ndim
            shape[k] = xi.size
            phase = phase + xi.reshape(shape) * h[k]
        return np.real(np.fft.ifftn(np.fft.fftn(values) * np.exp(1j * phase)))
    from scipy.ndimage import shift as nd_shift

    return nd_shift(values, -np.asarray(h) / np.asarray(box.spacing), order=1, mode="constant", cval=0.0)


def _directions(D: int, n_dir: int) -> np.ndarray:
    if D == 1:
        return np.array([[1.0], [-1.0]])
    if D == 2:
        ang = 2 * np.pi * np.arange(n_dir) / n_dir
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    # deterministic quasi-uniform directions on the sphere
    rng = np.random.default_rng(12345)
    u = rng.standard_normal((n_dir, D))
    return u / np.linalg.norm(u, axis=-1, keepdims=True)


def besov_seminorm(
    f,
    params: NormParams,
    n_shells: int = 64,
    n_dir: int = 8,
    r_min: float | None = None,
    r_max: float | None = None,
) -> float:
    """[f]_{B^s_{p,q}} with the shift integral over |h| <= r_max (default the
    box diameter) on log-radial shells.

    s in (0, 1): first differences; s = 1: second differences
    f(x + 2h) - 2 f(x + h) + f(x); s in (1, 2): first differences of each
    partial derivative with exponent s - 1, summed over the partials.
    """
    s, p, q = params.s, params.p, params.q_eff
    if not (0 < s < 2):
        raise NormDomainError(f"Besov smoothness must lie in (0, 2), got {s}")
    b = _box(f)
    if 1 < s < 2:
        total = 0.0
        inner = NormParams(s - 1, p, params.q)
        for k in range(b.values.ndim):
            dk = derivative_along(b.values, k, b.spacing[k], b.boundary)
            total += besov_seminorm(BoxArray(dk, b.L, b.boundary), inner, n_shells, n_dir, r_min, r_max)
        return total
    D = b.values.ndim
    if r_max is None:
        r_max = 2.0 * math.sqrt(sum(a * a for a in b.L))
    if r_min is None:
        r_min = 1e-2 * min(b.spacing)
    us = np.linspace(math.log(r_min), math.log(r_max), n_shells)
    dirs = _directions(D, n_dir)
    vals = b.values
    shell = np.empty(n_shells)
    for j, u in enumerate(us):
        r = math.exp(u)
        acc = 0.0
        for e in dirs:
            h = r * e
            if s == 1:
                diff = _shift(vals, b, 2 * h) - 2 * _shift(vals, b, h) + vals
            else:
                diff = _shift(vals, b, h) - vals
            acc += lp_norm(BoxArray(diff, b.L, b.boundary), p) ** q
        # surface measure of the unit sphere times the direction average
        area = 2.0 * math.pi ** (D / 2) / math.gamma(D / 2)
        shell[j] = area * acc / len(dirs) * r ** (-s * q)
    # dh / |h|^{D + s q} = r^{-s q} d(log r) dsigma
    integral = float(_trapezoid(shell, us))
    # below r_min the difference norm is linear in r: shell ~ r^{q - s q}
    expo = q * (1 - s) if s < 1 else q * (2 - s)
    integral += shell[0] / expo
    return integral ** (1.0 / q)


# ---------------------------------------------------------------------------
# mixed and X_{p,s} norms


def mixed_norm(f, params: NormParams, d: int | None = None) -> float:
    """(int ||f(., v)||_{H^s_p(x)}^p dv)^{1/p}; x axes come first."""
    b = _box(f)
    if b.boundary is not Boundary.PERIODIC:
        raise NormDomainError("mixed norms need periodic x slices")
    D = b.values.ndim
    d = D // 2 if d is None else d
    xa = tuple(range(d))
    hx = float(np.prod(b.spacing[:d]))
    hv = float(np.prod(b.spacing[d:]))
    p = params.p
    base = (np.sum(np.abs(b.values) ** p, axis=xa) * hx) ** (1.0 / p)
    semi = (np.sum(np.abs(fourier_power(b.values, b, params.s, xa)) ** p, axis=xa) * hx) ** (1.0 / p)
    slice_norm = base + semi if params.s > 0 else base
    return float((np.sum(slice_norm**p) * hv) ** (1.0 / p))


def xps_norm(f, params: NormParams, d: int | None = None) -> dict:
    """||f||_{W^{1,p}} + ||D^2_v f||_{L^p(H^s_p)} + ||v . D_x f||_{L^p(H^s_p)}."""
    b = _box(f)
    D = b.values.ndim
    d = D // 2 if d is None else d
    p = params.p
    grads = [derivative_along(b.values, k, b.spacing[k], b.boundary) for k in range(D)]
    w1p = lp_norm(b, p) + sum(lp_norm(BoxArray(g, b.L, b.boundary), p) for g in grads)
    dvv = 0.0
    for i in range(d):
        for j in range(d):
            h = derivative_along(grads[d + i], d + j, b.spacing[d + j], b.boundary)
            dvv += mixed_norm(BoxArray(h, b.L, b.boundary), params, d)
    mesh = np.stack(np.meshgrid(*b.axes(), indexing="ij"), axis=-1)
    vdx = sum(mesh[..., d + i] * grads[i] for i in range(d))
    transport = mixed_norm(BoxArray(vdx, b.L, b.boundary), params, d)
    return {"W1p": w1p, "Dvv_mixed": dvv, "v_Dx_mixed": transport, "total": w1p + dvv + transport, "s": params.s, "p": p}


# ---------------------------------------------------------------------------
# drift checker


def _drift_mixed(F: DriftField, params: NormParams, L: float, n: int) -> float:
    d = F.d
    Lt, nt = (float(L),) * (2 * d), (int(n),) * (2 * d)
    axes = lattice_axes(Lt, nt)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = np.asarray(F(mesh), dtype=float)
    return float(sum(mixed_norm(BoxArray(vals[..., j], Lt), params, d) for j in range(d)))


def hypothesis_check(F: DriftField, s: float = 0.7, p: int = 8, L: float = 8.0, n: int = 256, tol: float = 0.2) -> dict:
    """Grid mixed norm of F with its change under lattice refinement (n -> 2n)
    and under box growth (L -> 2L at fixed spacing). PASS when the value is
    finite and both relative changes stay below ``tol``."""
    d = F.d
    if not (2.0 / 3.0 < s < 1.0):
        raise NormDomainError("the drift condition uses s in (2/3, 1)")
    if not p > 6 * d:
        raise NormDomainError(f"the drift condition needs p > 6d = {6 * d}")
    params = NormParams(s, p)
    base = _drift_mixed(F, params, L, n)
    fine = _drift_mixed(F, params, L, 2 * n)
    grown = _drift_mixed(F, params, 2 * L, 2 * n)

    def rel(a, b):
        if a == 0 and b == 0:
            return 0.0
        return abs(b - a) / max(abs(a), abs(b))

    refine_change = rel(base, fine)
    box_change = rel(base, grown)
    finite = all(math.isfinite(x) for x in (base, fine, grown))
    verdict = "PASS" if finite and refine_change < tol and box_change < tol else "FAIL"
    return {
        "value": base,
        "refined_value": fine,
        "grown_value": grown,
        "refine_change": refine_change,
        "box_change": box_change,
        "verdict": verdict,
        "s": s,
        "p": p,
        "box": L,
        "n": n,
    }


def write_norm_table(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["norm_name", "s", "p", "q", "box", "n", "value"])
        for r in rows:
            w.writerow([r["norm_name"], repr(float(r["s"])), r["p"], r.get("q", ""), r["box"], r["n"], repr(float(r["value"]))])
