"""Stochastic kinetic transport through the characteristics representation.

The solution at time t along one noise path is f(t, z) = f0(phi_t^{-1}(z)),
with phi_t the stochastic flow; nothing here discretizes the SPDE itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import DriftField, KlabError, NoisePath, as_phase_array, make_drift
from .sde import FlowMap, QueryOutsideImage, Scheme, inverse_flow, simulate

TEST_CATALOG_VERSION = "bumps-1"


@dataclass(frozen=True, eq=False)
class TransportField:
    t: float
    query: np.ndarray  # (*lattice, 2d)
    values: np.ndarray  # (n_paths, *lattice)
    path_refs: tuple[str, ...]
    starters_box: tuple | None = None

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise KlabError("transport field has non-finite values")


def _drift(F) -> Callable:
    if isinstance(F, DriftField) or callable(F):
        return F
    return make_drift(F)


def box_lattice(lo, hi, n) -> np.ndarray:
    """Nodes of a closed box lattice (endpoints included), shape (*n, D)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = np.broadcast_to(np.asarray(n, dtype=int), lo.shape)
    axes = [np.linspace(a, b, int(m)) for a, b, m in zip(lo, hi, n)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _flow_images(F, starters, path: NoisePath, dt: float, t: float, scheme, corrector, keep_every=None):
    p = path.at_step(dt)
    steps = int(round(t / dt))
    inc = p.increments[:steps]
    if steps == 0:
        return np.array([0.0]), starters[None].copy()
    tr = simulate(F, starters, inc, dt, scheme, corrector, T=steps * dt, keep_every=keep_every)
    return tr.times, tr.states


def spde_solve(
    f0: Callable,
    F,
    t: float,
    query,
    paths: NoisePath | Sequence[NoisePath],
    dt: float,
    n_starters: int = 48,
    margin: float = 1.0,
    scheme: Scheme | str = Scheme.EM,
    corrector=None,
    max_grow: int = 8,
) -> TransportField:
    """f(t, q) = f0(phi_t^{-1}(q)) for every query point and path.

    The inverse flow comes from pushing a box lattice of starters forward and
    interpolating over the images; the starter box begins at the query box
    widened by ``margin`` and grows until every query is covered.
    """
    F = _drift(F)
    q = as_phase_array(query)
    qflat = q.reshape(-1, q.shape[-1])
    dim = q.shape[-1]
    if isinstance(paths, NoisePath):
        paths = [paths]
    scheme = Scheme.parse(scheme)
    vals, refs = [], []
    for path in paths:
        if t == 0:
            vals.append(np.asarray(f0(q), dtype=float))
            refs.append(path.identity())
            continue
        lo = qflat.min(axis=0) - margin
        hi = qflat.max(axis=0) + margin
        for _ in range(max_grow):
            starters = box_lattice(lo, hi, n_starters).reshape(-1, dim)
            _, states = _flow_images(F, starters, path, dt, t, scheme, corrector)
            images = states[-1]
            fm = FlowMap(t, starters, images, path.identity(), scheme, path.to_dict())
            try:
                pre = inverse_flow(fm, qflat)
                break
            except QueryOutsideImage:
                # widen where the image falls short of the queries
                ok = np.all(np.isfinite(images), axis=-1)
                short_lo = np.clip(images[ok].min(axis=0) - qflat.min(axis=0), 0, None)
                short_hi = np.clip(qflat.max(axis=0) - images[ok].max(axis=0), 0, None)
                lo = lo - 2 * short_lo - 0.5 * (hi - lo) * 0.25
                hi = hi + 2 * short_hi + 0.5 * (hi - lo) * 0.25
        else:
            raise QueryOutsideImage("starter box could not be grown to cover the query lattice")
        vals.append(np.asarray(f0(pre), dtype=float).reshape(q.shape[:-1]))
        refs.append(path.identity())
    return TransportField(t, q, np.stack(vals), tuple(refs))


def free_transport_closed_form(f0: Callable, t: float, query, path: NoisePath, dt: float) -> np.ndarray:
    """Exact inverse of the discrete free flow (F = 0) driven by ``path`` at
    step dt: v0 = v - W_t, x0 = x - t v0 - dt * sum_{k<n} W_{t_k}."""
    q = as_phase_array(query)
    d = q.shape[-1] // 2
    p = path.at_step(dt)
    n = int(round(t / dt))
    W = p.W()[: n + 1]
    v0 = q[..., d:] - W[n]
    x0 = q[..., :d] - t * v0 - dt * W[:n].sum(axis=0)
    return np.asarray(f0(np.concatenate([x0, v0], axis=-1)), dtype=float)


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class Bump:
    """Tensor bump prod_k exp(1 - 1/(1 - u_k^2)) with u = (z - center)/scale."""

    center: tuple[float, ...]
    scale: float

    def _u(self, z):
        return (as_phase_array(z) - np.asarray(self.center)) / self.scale

    def _b(self, u):
        inside = np.abs(u) < 1
        w = np.where(inside, 1 - u * u, 1.0)
        val = np.where(inside, np.exp(1 - 1 / w), 0.0)
        d1 = np.where(inside, val * (-2 * u / w**2), 0.0)
        d2 = np.where(inside, val * ((2 * u / w**2) ** 2 - (2 * w**2 + 8 * u * u * w) / w**4), 0.0)
        return val, d1 / self.scale, d2 / self.scale**2

    def __call__(self, z):
        val, _, _ = self._b(self._u(z))
        return np.prod(val, axis=-1)

    def grad(self, z):
        val, d1, _ = self._b(self._u(z))
        D = val.shape[-1]
        out = []
        for k in range(D):
            others = np.prod(np.delete(val, k, axis=-1), axis=-1)
            out.append(d1[..., k] * others)
        return np.stack(out, axis=-1)

    def lap_v(self, z):
        val, _, d2 = self._b(self._u(z))
        D = val.shape[-1]
        d = D // 2
        total = 0.0
        for k in range(d, D):
            others = np.prod(np.delete(val, k, axis=-1), axis=-1)
            total = total + d2[..., k] * others
        return total

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        return c - self.scale, c + self.scale


def test_catalog(d: int = 1) -> list[Bump]:
    """Fixed catalog: 3 scales x 5 centers."""
    D = 2 * d
    centers = [np.zeros(D)]
    for k in (0, d):
        for s in (1, -1):
            c = np.zeros(D)
            c[k] = 0.5 * s
            centers.append(c)
    return [Bump(tuple(c), s) for s in (0.5, 1.0, 1.5) for c in centers]


# ---------------------------------------------------------------------------
# weak form


def _trapz(y: np.ndarray, dx: float, axis: int = 0) -> np.ndarray:
    y = np.moveaxis(y, axis, 0)
    return dx * (y.sum(axis=0) - 0.5 * (y[0] + y[-1]))


def _quadrature_lattices(phis: Sequence[Bump], per_diameter: int):
    """Midpoint lattices, one per bump scale, covering that scale's supports
    with ``per_diameter`` cells across one bump."""
    groups: dict[float, list[int]] = {}
    for j, b in enumerate(phis):
        groups.setdefault(b.scale, []).append(j)
    out = []
    for scale, idx in groups.items():
        lo = np.min([phis[j].support()[0] for j in idx], axis=0)
        hi = np.max([phis[j].support()[1] for j in idx], axis=0)
        h = 2 * scale / per_diameter
        n = np.ceil((hi - lo) / h - 1e-9).astype(int)
        mids = [a + h * (np.arange(m) + 0.5) for a, m in zip(lo, n)]
        Q = np.stack(np.meshgrid(*mids, indexing="ij"), axis=-1).reshape(-1, lo.size)
        out.append((idx, Q, h ** lo.size))
    return out


def weak_form_residual(
    f0: Callable,
    F,
    T: float,
    phis: Sequence[Bump],
    paths: Sequence[NoisePath],
    dt: float,
    per_diameter: int = 96,
    n_starters: int = 48,
) -> dict:
    """Per-path residual of

        int f(T) phi + int_0^T int (b . Df) phi
          = int f0 phi + sum_i int_0^T (int f d_{v_i} phi) dW^i + 1/2 int_0^T int f Lap_v phi

    with b(z) = (v, F(z)). The transport term is evaluated after integrating
    by parts, -int f (b . grad phi + phi div_v F), so only f itself is
    sampled. Snapshots every dt (the flow step); time integrals by the
    composite trapezoid rule, the stochastic integral by left-point sums,
    space integrals by the midpoint rule.
    """
    F = _drift(F)
    div = F.div_v if isinstance(F, DriftField) else None
    lattices = _quadrature_lattices(phis, per_diameter)
    Q = np.concatenate([q for _, q, _ in lattices])
    D = Q.shape[-1]
    d = D // 2
    # weights[j, m]: quadrature weight of node m for test function j
    W = np.zeros((len(phis), len(Q)))
    start = 0
    for idx, q, cell in lattices:
        W[idx, start : start + len(q)] = cell
        start += len(q)
    phi_v = np.stack([b(Q) for b in phis]) * W
    grad = np.stack([b.grad(Q) for b in phis]) * W[..., None]
    lapv = np.stack([b.lap_v(Q) for b in phis]) * W
    bQ = np.concatenate([Q[:, d:], F(Q)], axis=-1)
    divQ = div(Q) if div is not None else 0.0
    transport_w = -(np.sum(grad * bQ[None], axis=-1) + phi_v * divQ)
    f0Q = np.asarray(f0(Q), dtype=float)
    n = int(round(T / dt))
    residuals = []
    for path in paths:
        p = path.at_step(dt)
        inc = p.increments[:n]
        starters_lo = Q.min(axis=0) - 1.0
        starters_hi = Q.max(axis=0) + 1.0
        grow = 0
        while True:
            starters = box_lattice(starters_lo, starters_hi, n_starters).reshape(-1, D)
            tr = simulate(F, starters, inc, dt, Scheme.EM, T=n * dt, keep_every=1)
            try:
                fvals = [f0Q]
                for k in range(1, n + 1):
                    fm = FlowMap(k * dt, starters, tr.states[k], p.identity(), Scheme.EM)
                    fvals.append(np.asarray(f0(inverse_flow(fm, Q)), dtype=float))
                break
            except QueryOutsideImage:
                grow += 1
                if grow > 6:
                    raise
                width = starters_hi - starters_lo
                starters_lo = starters_lo - 0.5 * width
                starters_hi = starters_hi + 0.5 * width
        fv = np.stack(fvals)  # (n+1, nodes)
        I_T = phi_v @ fv[-1]
        I_0 = phi_v @ fv[0]
        trans = fv @ transport_w.T  # (n+1, n_phi)
        diff = fv @ lapv.T
        stoch = np.zeros(len(phis))
        for i in range(d):
            Y = fv @ grad[:, :, d + i].T
            stoch += np.sum(Y[:-1] * inc[:, i][:, None], axis=0)
        res = I_T + _trapz(trans, dt) - I_0 - stoch - 0.5 * _trapz(diff, dt)
        residuals.append(res)
    R = np.array(residuals)
    return {
        "residuals": R,
        "rms": float(np.sqrt(np.mean(R**2))),
        "dt": dt,
        "n_paths": len(paths),
        "catalog": TEST_CATALOG_VERSION,
        "n_test_functions": len(phis),
    }


# ---------------------------------------------------------------------------
# regularity and uniqueness


def lattice_w1r(values: np.ndarray, spacing: Sequence[float], r: float) -> float:
    """||f||_r + ||grad f||_r on a lattice (central differences inside)."""
    cell = float(np.prod(spacing))
    grads = np.gradient(values, *spacing)
    if values.ndim == 1:
        grads = [grads]
    gnorm = np.sqrt(sum(g * g for g in grads))
    return float((np.sum(np.abs(values) ** r) * cell) ** (1 / r) + (np.sum(gnorm**r) * cell) ** (1 / r))


def sobolev_diagnostic(field: TransportField, r: float = 4.0) -> dict:
    """Grid W^{1,r} norm per path over the query lattice (assumed a box
    lattice from :func:`box_lattice`)."""
    q = field.query
    D = q.shape[-1]
    spacing = []
    for k in range(D):
        ax = np.moveaxis(q[..., k], k, 0)
        spacing.append(float(ax[1].flat[0] - ax[0].flat[0]))
    norms = np.array([lattice_w1r(v, spacing, r) for v in field.values])
    return {"per_path": norms, "median": float(np.median(norms)), "mean": float(norms.mean()), "r": r}


def sup_gradient(values: np.ndarray, spacing: Sequence[float]) -> float:
    grads = np.gradient(values, *spacing)
    if values.ndim == 1:
        grads = [grads]
    return float(np.sqrt(sum(g * g for g in grads)).max())


def flow_jacobian(images: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """det D phi on a box lattice of starters from central differences of the
    images; images has shape (*lattice, D)."""
    D = images.shape[-1]
    cols = [np.gradient(images[..., k], *spacing) for k in range(D)]
    J = np.empty(images.shape[:-1] + (D, D))
    for k in range(D):
        g = cols[k] if D > 1 else [cols[k]]
        for j in range(D):
            J[..., k, j] = g[j]
    return np.linalg.det(J)


def energy_uniqueness_check(
    F,
    times: Sequence[float],
    n_paths: int,
    dt: float,
    eps0: float = 1e-3,
    support: float = 1.5,
    n: int = 64,
    seed: int = 0,
    zero_datum: bool = False,
) -> dict:
    """g_hat(t) = int E f(t, z)^2 dz for the datum f0 = eps0 * lattice white
    noise on [-support, support]^{2d} (or f0 = 0 exactly).

    By the change of variables z = phi_t(z0), int f(t)^2 = int f0^2 det D phi_t,
    so each path needs only the starters' images; the Jacobian comes from
    central differences of the image lattice."""
    from .core import make_rng

    F = _drift(F)
    d = F.d if isinstance(F, DriftField) else 1
    D = 2 * d
    axes = [np.linspace(-support, support, n)] * D
    h = 2 * support / (n - 1)
    starters = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    if zero_datum:
        f0 = np.zeros(starters.shape[:-1])
    else:
        f0 = eps0 * make_rng(seed, 10_000).standard_normal(starters.shape[:-1])
    cell = h**D
    # edge nodes use one-sided Jacobians; weight them like interior nodes
    g0 = float(np.sum(f0**2) * cell)
    zs = starters.reshape(-1, D)
    div_sup = float(np.abs(F.div_v(zs)).max()) if isinstance(F, DriftField) else 0.0
    T = max(times)
    ratios = np.zeros((n_paths, len(times)))
    ghat = np.zeros((n_paths, len(times)))
    for j in range(n_paths):
        path = NoisePath(seed, T, dt, d, index=j)
        keep = [int(round(t / dt)) for t in times]
        tr = simulate(F, zs, path.increments, dt, Scheme.EM, T=T, keep_every=1)
        for m, k in enumerate(keep):
            img = tr.states[k].reshape(starters.shape)
            Jd = flow_jacobian(img, [h] * D)
            ghat[j, m] = float(np.sum(f0**2 * np.abs(Jd)) * cell)
            ratios[j, m] = ghat[j, m] / g0 if g0 > 0 else 0.0
    bound = np.exp(div_sup * np.asarray(times))
    mean_ratio = ratios.mean(axis=0)
    return {
        "times": list(map(float, times)),
        "g0": g0,
        "g_hat": ghat.mean(axis=0),
        "ratio_mean": mean_ratio,
        "ratio_max": ratios.max(axis=0),
        "div_v_sup": div_sup,
        "bound": bound,
        "within_bound": bool(np.all(ratios <= 1.1 * bound[None])),
        "n_paths": n_paths,
        "eps0": eps0,
        "seed": seed,
    }
