"""Monte Carlo diagnostics of the stochastic flow.

Girsanov reweighting against the free (F = 0) dynamics, exponential moments
of occupation integrals, the process A_t, Holder and injectivity regressions,
surjectivity of the flow and convergence of flows under mollified drifts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import hyp1f1, logsumexp

from .core import (
    DriftField,
    DriftKind,
    KlabError,
    NoisePath,
    as_phase_array,
    brownian_increments,
    make_drift,
    smooth_cutoff,
)
from .kolmogorov import ZvonkinCorrector
from .sde import FlowMap, QueryOutsideImage, Scheme, inverse_flow, flow_ensemble, simulate

COLLAPSE = 1e-14
MOM_BLOCKS = 32


@dataclass(frozen=True)
class Estimate:
    estimator: str
    n_paths: int
    value: float
    se: float
    seed: int | None = None

    @property
    def band(self) -> float:
        return 3.0 * self.se

    def to_dict(self) -> dict:
        out = asdict(self)
        out["band"] = self.band
        return out


def mean_estimate(samples: np.ndarray, estimator: str, seed: int | None = None) -> Estimate:
    s = np.asarray(samples, dtype=float).ravel()
    se = float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else math.inf
    return Estimate(estimator, int(s.size), float(s.mean()), se, seed)


def median_of_means(samples: np.ndarray, blocks: int = MOM_BLOCKS) -> tuple[float, float]:
    """Median of block means and a spread-based standard error."""
    s = np.asarray(samples, dtype=float).ravel()
    k = min(blocks, s.size)
    means = np.array([b.mean() for b in np.array_split(s, k)])
    med = float(np.median(means))
    # asymptotic sd of the median of k roughly normal block means
    se = float(1.2533 * means.std(ddof=1) / math.sqrt(k)) if k > 1 else math.inf
    return med, se


def _drift(F) -> Callable:
    if isinstance(F, DriftField) or callable(F):
        return F
    return make_drift(F)


def _increments(seed: int, T: float, dt: float, d: int, n_paths: int, start: int = 0) -> np.ndarray:
    return brownian_increments(seed, T, dt, d, n_paths, start)


# ---------------------------------------------------------------------------
# Girsanov


@dataclass(frozen=True)
class GirsanovWeight:
    phi: np.ndarray
    log_phi: np.ndarray
    stochastic_integral: np.ndarray
    quadratic_term: np.ndarray
    free_end: np.ndarray  # L_T, endpoint of the free path


def free_path(z, increments: np.ndarray, dt: float, keep: bool = False):
    """Discrete free dynamics (F = 0) driven by the given increments."""
    z = as_phase_array(z).astype(float)
    d = z.shape[-1] // 2
    shape = np.broadcast_shapes(z.shape, increments.shape[1:-1] + (2 * d,))
    z = np.broadcast_to(z, shape).copy()
    states = [z.copy()] if keep else None
    for k in range(increments.shape[0]):
        z = np.concatenate([z[..., :d] + z[..., d:] * dt, z[..., d:] + increments[k]], axis=-1)
        if keep:
            states.append(z.copy())
    return np.stack(states) if keep else z


def girsanov_weight(F, noise, z, dt: float, T: float | None = None) -> GirsanovWeight:
    """Phi_T = exp(sum F(L_k).dW_k - 1/2 sum |F(L_k)|^2 dt) along the free path L,
    left-point in time. Under this weight L has exactly the law of the
    Euler-Maruyama chain for the drift F."""
    F = _drift(F)
    if isinstance(noise, NoisePath):
        noise = noise.at_step(dt).increments
    inc = np.asarray(noise, dtype=float)
    z = as_phase_array(z).astype(float)
    d = z.shape[-1] // 2
    shape = np.broadcast_shapes(z.shape, inc.shape[1:-1] + (2 * d,))
    L = np.broadcast_to(z, shape).copy()
    stoch = np.zeros(shape[:-1])
    quad = np.zeros(shape[:-1])
    for k in range(inc.shape[0]):
        f = F(L)
        stoch += np.sum(f * inc[k], axis=-1)
        quad += 0.5 * np.sum(f * f, axis=-1) * dt
        L = np.concatenate([L[..., :d] + L[..., d:] * dt, L[..., d:] + inc[k]], axis=-1)
    log_phi = stoch - quad
    return GirsanovWeight(np.exp(log_phi), log_phi, stoch, quad, L)


def girsanov_mean(F, z, T: float, dt: float, n_paths: int, seed: int, chunk: int = 20000) -> Estimate:
    """Ensemble mean of Phi_T; 1 within MC error for a true martingale."""
    F = _drift(F)
    d = F.d if isinstance(F, DriftField) else as_phase_array(z).shape[-1] // 2
    vals = []
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        inc = _increments(seed, T, dt, d, m, start)
        vals.append(girsanov_weight(F, inc, z, dt).phi)
    return mean_estimate(np.concatenate(vals), "girsanov_mean", seed)


def effective_sample_size(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))


def weak_expectation_reweighted(
    h: Callable, F, T: float, n_paths: int, z, dt: float = 1e-2, seed: int = 0, ess_floor: float = 0.1
) -> dict:
    """E[h(Z_T)] as E[h(L_T) Phi_T] over free paths."""
    F = _drift(F)
    d = as_phase_array(z).shape[-1] // 2
    inc = _increments(seed, T, dt, d, n_paths)
    gw = girsanov_weight(F, inc, z, dt)
    est = mean_estimate(h(gw.free_end) * gw.phi, "reweighted", seed)
    ess = effective_sample_size(gw.phi)
    return {"estimate": est, "ess": ess, "degenerate": ess < ess_floor * n_paths}


def weak_expectation_direct(h: Callable, F, T: float, n_paths: int, z, dt: float = 1e-2, seed: int = 1) -> Estimate:
    d = as_phase_array(z).shape[-1] // 2
    inc = _increments(seed, T, dt, d, n_paths)
    z0 = np.broadcast_to(as_phase_array(z), (n_paths, 2 * d))
    end = simulate(_drift(F), z0, inc, dt, Scheme.EM, T=T, keep_every=None).end
    return mean_estimate(h(end), "direct", seed)


def estimates_agree(a: Estimate, b: Estimate, k: float = 3.0) -> bool:
    return abs(a.value - b.value) <= k * math.hypot(a.se, b.se)


# ---------------------------------------------------------------------------
# exponential moments


def khasminskii_exp_moment(
    f: Callable, T: float, n_paths: int, starters, dt: float = 1e-2, seed: int = 0
) -> dict:
    """Per-starter MC estimate of E exp(int_0^T f(L_s) ds) along free paths,
    computed in log space, with the sup over starters and the statistic
    alpha = sup_z E int_0^T f(L_s) ds."""
    z = as_phase_array(starters)
    z = z.reshape(-1, z.shape[-1])
    d = z.shape[-1] // 2
    inc = _increments(seed, T, dt, d, n_paths)
    L = np.broadcast_to(z[:, None, :], (z.shape[0], n_paths, 2 * d)).copy()
    occ = np.zeros(L.shape[:-1])
    for k in range(inc.shape[0]):
        occ += np.asarray(f(L), dtype=float) * dt
        L = np.concatenate([L[..., :d] + L[..., d:] * dt, L[..., d:] + inc[k]], axis=-1)
    if np.any(occ < 0):
        raise KlabError("observable must be nonnegative")
    log_moment = logsumexp(occ, axis=1) - math.log(n_paths)
    per_z = np.exp(np.minimum(log_moment, 700.0))
    return {
        "per_starter": per_z,
        "log_per_starter": log_moment,
        "sup": float(per_z.max()),
        "alpha": float(occ.mean(axis=1).max()),
        "occupation_mean": occ.mean(axis=1),
        "n_paths": n_paths,
        "seed": seed,
    }


def at_process(U: ZvonkinCorrector, trajA, trajB, dt: float | None = None) -> np.ndarray:
    """A_t = int_0^t 1{Z != Y} |(DU(Z) - DU(Y)) R|_HS^2 / |Z - Y|^2 ds
    by left-point Riemann sums; returns the running values at the stored times."""
    za = trajA.states if hasattr(trajA, "states") else np.asarray(trajA)
    zb = trajB.states if hasattr(trajB, "states") else np.asarray(trajB)
    times = trajA.times if hasattr(trajA, "times") else None
    if za.shape != zb.shape:
        raise KlabError("trajectories must share their time grid")
    d = za.shape[-1] // 2
    if times is None:
        if dt is None:
            raise KlabError("dt is required for raw state arrays")
        times = dt * np.arange(za.shape[0])
    diff = np.linalg.norm(za - zb, axis=-1)
    DR = (U.DU_at(za) - U.DU_at(zb))[..., :, d:]
    hs = np.sum(DR * DR, axis=(-2, -1))
    apart = diff > 1e-14
    integrand = np.where(apart, hs / np.where(apart, diff, 1.0) ** 2, 0.0)
    steps = np.diff(times).reshape((-1,) + (1,) * (integrand.ndim - 1))
    A = np.concatenate([np.zeros((1,) + integrand.shape[1:]), np.cumsum(integrand[:-1] * steps, axis=0)])
    return A


# ---------------------------------------------------------------------------
# regressions on the flow


def _pair_flows(F, z, offsets: np.ndarray, T, dt, n_paths, seed, scheme, corrector):
    """Endpoints for z and z + offsets[j] under common noise per path:
    shape (1 + n_offsets, n_paths, 2d)."""
    z = as_phase_array(z).astype(float)
    d = z.shape[-1] // 2
    starts = np.concatenate([z[None], z[None] + offsets], axis=0)
    starts = np.broadcast_to(starts[:, None, :], (starts.shape[0], n_paths, 2 * d)).copy()
    inc = _increments(seed, T, dt, d, n_paths)
    return simulate(_drift(F), starts, inc, dt, scheme, corrector, T=T, keep_every=None).end


def _loglog_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    X = np.log(x)
    Y = np.log(y)
    A = np.vstack([X, np.ones_like(X)]).T
    coef, res, *_ = np.linalg.lstsq(A, Y, rcond=None)
    n = len(X)
    if n > 2:
        sigma2 = float(np.sum((Y - A @ coef) ** 2) / (n - 2))
        se = math.sqrt(sigma2 / np.sum((X - X.mean()) ** 2))
    else:
        se = 0.0
    return float(coef[0]), float(coef[1]), se


def holder_exponent_regression(
    F,
    a: float,
    T: float,
    separations: Sequence[float],
    n_paths: int,
    z=(0.0, 0.0),
    direction=None,
    dt: float = 1e-2,
    seed: int = 0,
    scheme: Scheme | str = Scheme.EM,
    corrector: ZvonkinCorrector | None = None,
) -> dict:
    """Slope of log E|Z_T^z - Z_T^y|^a against log |z - y|."""
    seps = np.asarray(separations, dtype=float)
    if a < 2:
        raise KlabError("moment order a must be >= 2")
    if seps.max() / seps.min() < 99.999:
        raise KlabError("separations must span at least two decades")
    z = as_phase_array(z).astype(float)
    e = np.zeros(z.shape[-1]) if direction is None else np.asarray(direction, dtype=float)
    if direction is None:
        e[0] = 1.0
    e = e / np.linalg.norm(e)
    ends = _pair_flows(F, z, seps[:, None] * e, T, dt, n_paths, seed, Scheme.parse(scheme), corrector)
    dist = np.linalg.norm(ends[1:] - ends[0][None], axis=-1)
    moments = np.mean(dist**a, axis=1)
    slope, icpt, se = _loglog_fit(seps, moments)
    return {"slope": slope, "slope_se": se, "intercept": icpt, "separations": seps, "moments": moments, "n_paths": n_paths, "seed": seed, "a": a}


def deterministic_ratio(F, z, y, T: float, dt: float = 1e-4) -> float:
    """|z_T - y_T| / |z - y| for the noiseless characteristics."""
    from .characteristics import integrate_ode

    pts = np.stack([as_phase_array(z), as_phase_array(y)])
    end = integrate_ode(_drift(F), pts, T, dt, keep=False).end
    return float(np.linalg.norm(end[0] - end[1]) / np.linalg.norm(pts[0] - pts[1]))


def injectivity_margin(
    F,
    pairs,
    a: float,
    T: float,
    n_paths: int,
    dt: float = 1e-2,
    seed: int = 0,
    scheme: Scheme | str = Scheme.EM,
    corrector: ZvonkinCorrector | None = None,
) -> dict:
    """Median-of-means estimate of E|Z_T^z - Z_T^y|^a (a < 0) for each pair
    (z, y); path pairs closer than 1e-14 are excluded and counted."""
    if not a < 0:
        raise KlabError("injectivity margin uses a negative exponent")
    pairs = np.asarray(pairs, dtype=float)
    if pairs.ndim == 2:
        pairs = pairs[None]
    n_pairs, _, dim = pairs.shape
    d = dim // 2
    if np.any(np.linalg.norm(pairs[:, 0] - pairs[:, 1], axis=-1) == 0):
        raise KlabError("pairs must be distinct")
    inc = _increments(seed, T, dt, d, n_paths)
    starts = np.broadcast_to(pairs.transpose(1, 0, 2)[:, :, None, :], (2, n_pairs, n_paths, dim)).copy()
    ends = simulate(_drift(F), starts, inc, dt, Scheme.parse(scheme), corrector, T=T, keep_every=None).end
    dist = np.linalg.norm(ends[0] - ends[1], axis=-1)
    collapsed = dist < COLLAPSE
    values, ses = [], []
    for j in range(n_pairs):
        ok = dist[j][~collapsed[j]]
        m, se = median_of_means(ok**a) if ok.size else (math.nan, math.nan)
        values.append(m)
        ses.append(se)
    return {
        "values": np.array(values),
        "se": np.array(ses),
        "collapse_events": int(collapsed.sum()),
        "n_pairs": n_pairs,
        "n_paths": n_paths,
        "min_distance": float(dist.min()),
        "seed": seed,
    }


def surjectivity_coverage(
    fm: FlowMap, lo, hi, n_probe: int, F=None, path: NoisePath | None = None, dt: float | None = None, tol: float | None = None, corrector=None
) -> dict:
    """Fraction of a probe lattice in the box [lo, hi] that the flow image
    covers; with F and path supplied each probe must also pass the
    re-integration residual within ``tol``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if n_probe == 0:
        return {"coverage": 1.0, "n_probe": 0, "covered": 0}
    axes = [np.linspace(a, b, n_probe) for a, b in zip(lo, hi)]
    probes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    covered = np.zeros(len(probes), dtype=bool)
    starts = np.full(probes.shape, np.nan)
    for j, q in enumerate(probes):
        try:
            starts[j] = inverse_flow(fm, q)
            covered[j] = True
        except QueryOutsideImage:
            pass
    residual_max = None
    if F is not None and path is not None and covered.any():
        back = flow_ensemble(F, starts[covered], path, dt, fm.scheme, corrector, fm.t).images
        res = np.linalg.norm(back - probes[covered], axis=-1)
        residual_max = float(res.max())
        if tol is not None:
            ok = np.zeros_like(covered)
            ok[np.flatnonzero(covered)] = res <= tol
            covered = ok
    return {"coverage": float(covered.mean()), "n_probe": int(len(probes)), "covered": int(covered.sum()), "residual_max": residual_max}


# ---------------------------------------------------------------------------
# mollified drifts


def smoothed_signed_power(x: np.ndarray, alpha: float, width: float) -> np.ndarray:
    """E[sign(x - width Y) |x - width Y|^alpha] for standard normal Y, in
    closed form through Kummer's function."""
    x = np.asarray(x, dtype=float)
    if width == 0:
        return np.sign(x) * np.abs(x) ** alpha
    s = float(width)
    c = s**alpha * 2 ** ((alpha + 1) / 2) * gamma_fn(alpha / 2 + 1) / math.sqrt(math.pi)
    u = x / s
    far = np.abs(u) > 40.0
    out = np.empty_like(x)
    a = (1 - alpha) / 2
    arg = -0.5 * u[~far] ** 2
    # scipy's hyp1f1 returns inf/nan for |arg| below ~1e-200; two series terms suffice there
    tiny = np.abs(arg) < 1e-16
    kummer = np.where(tiny, 1 + a / 1.5 * arg, hyp1f1(a, 1.5, np.where(tiny, -1.0, arg)))
    out[~far] = c * u[~far] * kummer
    # beyond 40 widths the asymptotic series is exact to double precision
    xf = x[far]
    out[far] = np.sign(xf) * np.abs(xf) ** alpha * (
        1 + alpha * (alpha - 1) / 2 * (s / xf) ** 2 + alpha * (alpha - 1) * (alpha - 2) * (alpha - 3) / 8 * (s / xf) ** 4
    )
    return out


def mollify_drift(F: DriftField, width: float) -> DriftField:
    """Gaussian smoothing in x of width ``width``. For the counterexample the
    singular factor sign(x)|x|^alpha is smoothed in closed form and the smooth
    cutoff is kept; other drifts are smoothed by 32-point Gauss-Hermite
    quadrature in each x component."""
    if width < 0:
        raise KlabError("width must be >= 0")
    if width == 0:
        return F
    d = F.d
    if F.kind is DriftKind.COUNTEREXAMPLE:
        alpha, sign, cutoff = F.alpha, F.sign, F.cutoff

        def smoothed(z):
            z = as_phase_array(z)
            theta = smooth_cutoff(cutoff, z)[..., None]
            return sign * theta * smoothed_signed_power(z[..., :d], alpha, width)

        return DriftField.from_callable(smoothed, d=d, label=f"mollified(width={width:g})")
    nodes, weights = np.polynomial.hermite_e.hermegauss(32)
    weights = weights / weights.sum()

    def smoothed(z):
        z = as_phase_array(z)
        acc = 0.0
        for y, w in zip(nodes, weights):
            shift = np.zeros(2 * d)
            shift[:d] = width * y
            acc = acc + w * F(z - shift)
        return acc

    return DriftField.from_callable(smoothed, d=d, label=f"mollified(width={width:g})")


def mollified_convergence(
    F: DriftField,
    widths: Sequence[float],
    starters,
    T: float,
    n_paths: int,
    dt: float = 1e-2,
    seed: int = 0,
    a: float = 1.0,
    keep_every: int = 10,
) -> dict:
    """Sup over starters and stored times of E|phi_n - phi|^a, where phi_n
    is the flow of the mollified drift, all under common noise."""
    z = as_phase_array(starters)
    z = z.reshape(-1, z.shape[-1])
    d = z.shape[-1] // 2
    inc = _increments(seed, T, dt, d, n_paths)
    z0 = np.broadcast_to(z[:, None, :], (z.shape[0], n_paths, 2 * d)).copy()
    ref = simulate(F, z0, inc, dt, Scheme.EM, T=T, keep_every=keep_every).states
    out = []
    for w in widths:
        st = simulate(mollify_drift(F, w), z0, inc, dt, Scheme.EM, T=T, keep_every=keep_every).states
        err = np.linalg.norm(st - ref, axis=-1) ** a
        out.append(float(err.mean(axis=-1).max()))
    return {"widths": list(map(float, widths)), "discrepancy": out, "n_paths": n_paths, "seed": seed, "dt": dt}


def is_decreasing_to_floor(seq: Sequence[float], floor: float) -> bool:
    """Strictly decreasing until entries drop below ``floor``."""
    seq = list(seq)
    for a, b in zip(seq, seq[1:]):
        if a <= floor:
            return True
        if not b < a:
            return False
    return True
