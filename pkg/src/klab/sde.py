"""Integrators for dX = V dt, dV = F(X, V) dt + dW.

Every integrator works on batches: ``z0`` has shape ``(..., 2d)`` and the
noise is either a :class:`NoisePath` (one path shared by every starter) or
an increment array of shape ``(n_steps, *batch, d)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import DriftField, KlabError, NoisePath, _step_count, as_phase_array, make_drift
from .kolmogorov import ZvonkinCorrector


class Scheme(str, enum.Enum):
    EM = "em"
    SPLIT = "split"
    ZVONKIN = "zvonkin"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, Scheme):
            return value
        aliases = {"eulermaruyama": "em", "ousplitting": "split", "zvonkintransformed": "zvonkin"}
        key = str(value).lower().replace("_", "").replace("-", "")
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise KlabError(f"unknown scheme {value!r}; use em, split or zvonkin") from None


class QueryOutsideImage(KlabError):
    """Inverse-flow query not covered by the image of the starter lattice."""


class GammaInverseError(KlabError):
    pass


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_out, *batch, 2d)
    path_ref: str
    scheme: Scheme
    exited: np.ndarray | None = None  # per batch member, zvonkin only

    def __post_init__(self) -> None:
        if len(self.times) != len(self.states):
            raise KlabError("times and states differ in length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise KlabError("times must be strictly increasing")

    @property
    def end(self) -> np.ndarray:
        return self.states[-1]


def _noise(noise, dt: float, T: float | None) -> tuple[np.ndarray, float, str]:
    if isinstance(noise, NoisePath):
        p = noise.at_step(dt) if not math.isclose(dt, noise.dt_base, rel_tol=1e-12) else noise
        return p.increments, p.T, p.identity()
    inc = np.asarray(noise, dtype=float)
    if T is None:
        T = inc.shape[0] * dt
    if inc.shape[0] != _step_count(T, dt):
        raise KlabError("increment array length does not match T/dt")
    return inc, T, "array"


def _F(F) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(F, DriftField) or callable(F):
        return F
    return make_drift(F)


def em_step(F, z: np.ndarray, dW: np.ndarray, dt: float) -> np.ndarray:
    d = z.shape[-1] // 2
    x, v = z[..., :d], z[..., d:]
    return np.concatenate([x + v * dt, v + F(z) * dt + dW], axis=-1)


def ou_splitting_step(F, z, increment, dt: float) -> np.ndarray:
    """Exact shear e^{dt A}, noise (dW dt/2, dW), then the drift kick F(z) dt
    with F evaluated at the start of the step."""
    F = _F(F)
    z = as_phase_array(z)
    dW = np.asarray(increment, dtype=float)
    d = z.shape[-1] // 2
    x, v = z[..., :d], z[..., d:]
    return np.concatenate([x + v * dt + 0.5 * dt * dW, v + dW + F(z) * dt], axis=-1)


# ---------------------------------------------------------------------------
# Zvonkin coordinates


def gamma_apply(U: ZvonkinCorrector, z) -> np.ndarray:
    z = as_phase_array(z)
    return z + U.U_at(z)


def gamma_inverse(U: ZvonkinCorrector, y, tol: float = 1e-12, max_iter: int | None = None, return_iterations: bool = False):
    """Solve z + U(z) = y by z <- y - U(z); contraction ratio sup|DU| < 1/2."""
    y = as_phase_array(y)
    lip = max(U.lip, 1e-16)
    if max_iter is None:
        max_iter = int(math.ceil(math.log(tol) / math.log(min(lip, 0.5)))) + 5
    z = y.copy()
    for k in range(1, max_iter + 1):
        z_new = y - U.U_at(z)
        step = np.abs(z_new - z).max() if z.size else 0.0
        z = z_new
        if step <= tol:
            return (z, k) if return_iterations else z
    raise GammaInverseError(f"gamma inverse did not reach {tol:g} in {max_iter} iterations")


# ---------------------------------------------------------------------------
# integrators


def simulate(
    F,
    z0,
    noise,
    dt: float,
    scheme: Scheme | str = Scheme.EM,
    corrector: ZvonkinCorrector | None = None,
    T: float | None = None,
    keep_every: int | None = 1,
) -> Trajectory:
    """Integrate a batch of starters. ``keep_every=None`` stores only the
    endpoints. Increments of shape ``(n_steps, d)`` are shared across the
    batch; shape ``(n_steps, *batch, d)`` gives each member its own noise."""
    scheme = Scheme.parse(scheme)
    F = _F(F)
    z = as_phase_array(z0).astype(float).copy()
    inc, T, ref = _noise(noise, dt, T)
    n = inc.shape[0]
    d = z.shape[-1] // 2
    if inc.shape[-1] != d:
        raise KlabError("noise dimension does not match the phase space")
    exited = None
    if scheme is Scheme.ZVONKIN:
        if corrector is None:
            raise KlabError("zvonkin scheme needs a ZvonkinCorrector")
        lam = corrector.lam
        y = gamma_apply(corrector, z)
        exited = ~corrector.inside(z)
        z = np.where(exited[..., None], np.nan, z)
    keep = [0] if keep_every else []
    out = [z.copy()]
    for k in range(n):
        dW = inc[k]
        if scheme is Scheme.EM:
            z = em_step(F, z, dW, dt)
        elif scheme is Scheme.SPLIT:
            z = ou_splitting_step(F, z, dW, dt)
        else:
            zs = np.where(exited[..., None], 0.0, z)
            Az = np.concatenate([zs[..., d:], np.zeros_like(zs[..., d:])], axis=-1)
            Uz = corrector.U_at(zs)
            DUR = corrector.DU_at(zs)[..., :, d:]
            dWb = np.broadcast_to(dW, zs.shape[:-1] + (d,))
            noise_term = np.einsum("...ij,...j->...i", DUR, dWb)
            noise_term[..., d:] += dWb
            y = y + (lam * Uz + Az) * dt + noise_term
            z = gamma_inverse(corrector, y)
            exited = exited | ~corrector.inside(z)
            z = np.where(exited[..., None], np.nan, z)
        if keep_every and ((k + 1) % keep_every == 0 or k + 1 == n):
            out.append(z.copy())
            keep.append(k + 1)
    if not keep_every:
        out.append(z.copy())
        keep = [0, n]
    times = dt * np.asarray(keep, dtype=float)
    return Trajectory(times, np.stack(out), ref, scheme, exited)


def euler_maruyama(F, z0, path, dt: float, keep_every: int | None = 1) -> Trajectory:
    return simulate(F, z0, path, dt, Scheme.EM, keep_every=keep_every)


def split_integrate(F, z0, path, dt: float, keep_every: int | None = 1) -> Trajectory:
    return simulate(F, z0, path, dt, Scheme.SPLIT, keep_every=keep_every)


def zvonkin_integrate(F, U: ZvonkinCorrector, lam: float, z0, path, dt: float, keep_every: int | None = 1) -> Trajectory:
    """Euler-Maruyama for gamma(Z) with drift lam U + A z, mapped back each step.
    ``lam`` must be the parameter the corrector was built with."""
    if not math.isclose(lam, U.lam) and U.lam != 0.0:
        raise KlabError(f"corrector was built for lambda={U.lam:g}, not {lam:g}")
    return simulate(F, z0, path, dt, Scheme.ZVONKIN, corrector=U, keep_every=keep_every)


# ---------------------------------------------------------------------------
# flows


@dataclass(frozen=True, eq=False)
class FlowMap:
    t: float
    initial: np.ndarray  # (N, 2d)
    images: np.ndarray  # (N, 2d)
    path_ref: str
    scheme: Scheme
    path: dict | None = None
    lattice_shape: tuple[int, ...] | None = None
    _interp: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.initial.shape != self.images.shape:
            raise KlabError("starters and images must correspond one to one")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        meta = {
            "t": self.t,
            "path_ref": self.path_ref,
            "scheme": self.scheme.value,
            "path": self.path,
            "lattice_shape": list(self.lattice_shape) if self.lattice_shape else None,
        }
        np.savez(path, initial=self.initial, images=self.images, meta=json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "FlowMap":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            shape = tuple(meta["lattice_shape"]) if meta["lattice_shape"] else None
            return cls(meta["t"], data["initial"], data["images"], meta["path_ref"], Scheme(meta["scheme"]), meta["path"], shape)


def flow_ensemble(
    F,
    starters,
    path: NoisePath,
    dt: float,
    scheme: Scheme | str = Scheme.EM,
    corrector: ZvonkinCorrector | None = None,
    t: float | None = None,
) -> FlowMap:
    """Push every starter through the same noise path up to time t (default path.T)."""
    z0 = as_phase_array(starters)
    shape = z0.shape[:-1]
    flat = z0.reshape(-1, z0.shape[-1])
    T = path.T if t is None else t
    p = path.at_step(dt)
    inc = p.increments[: _step_count(T, dt)]
    tr = simulate(F, flat, inc, dt, scheme, corrector, T=T, keep_every=None)
    return FlowMap(T, flat.copy(), tr.end, p.identity(), Scheme.parse(scheme), path.to_dict(), shape if len(shape) > 1 else None)


def inverse_flow(fm: FlowMap, z) -> np.ndarray:
    """Starting point of the flow line through z at time fm.t, by piecewise
    linear interpolation over a Delaunay triangulation of the images."""
    from scipy.interpolate import LinearNDInterpolator

    z = as_phase_array(z)
    interp = fm._interp.get("lin")
    if interp is None:
        finite = np.all(np.isfinite(fm.images), axis=-1)
        interp = LinearNDInterpolator(fm.images[finite], fm.initial[finite])
        fm._interp["lin"] = interp
    q = z.reshape(-1, z.shape[-1])
    out = interp(q)
    if np.any(np.isnan(out)):
        bad = int(np.isnan(out).any(axis=-1).sum())
        raise QueryOutsideImage(f"{bad} query point(s) outside the image of the starter lattice; widen the starters")
    return out.reshape(z.shape)


def reintegration_residual(fm: FlowMap, F, z, path: NoisePath, dt: float, corrector=None) -> np.ndarray:
    """|phi_t(inverse_flow(z)) - z| re-running the same noise path."""
    z = as_phase_array(z)
    z0 = inverse_flow(fm, z)
    back = flow_ensemble(F, z0.reshape(-1, z.shape[-1]), path, dt, fm.scheme, corrector, fm.t)
    return np.linalg.norm(back.images.reshape(z.shape) - z, axis=-1)


# ---------------------------------------------------------------------------
# weak derivatives


def difference_quotient(
    F,
    z,
    h: float,
    i: int,
    noise,
    dt: float,
    scheme: Scheme | str = Scheme.EM,
    corrector: ZvonkinCorrector | None = None,
    T: float | None = None,
) -> np.ndarray:
    """theta = (phi_T(z + h e_i) - phi_T(z)) / h under common noise.

    For the em and split schemes the pair difference is propagated directly,
    so the noise cancels exactly and linear flows give e^{TA} e_i to
    roundoff. Batch axes of ``z`` (or of the increments) are carried along.
    """
    if not h > 0:
        raise KlabError("h must be positive")
    scheme = Scheme.parse(scheme)
    F = _F(F)
    z = as_phase_array(z).astype(float)
    inc, T, _ = _noise(noise, dt, T)
    dim = z.shape[-1]
    d = dim // 2
    e = np.zeros(dim)
    e[i] = h
    if scheme is Scheme.ZVONKIN:
        zz = np.stack(np.broadcast_arrays(z, z + e))
        if inc.ndim > 2:
            inc = np.broadcast_to(inc[:, None], (inc.shape[0], 2) + inc.shape[1:])
        tr = simulate(F, zz, inc, dt, scheme, corrector, T=T, keep_every=None)
        return (tr.end[1] - tr.end[0]) / h
    shape = np.broadcast_shapes(z.shape, inc.shape[1:-1] + (dim,))
    z = np.broadcast_to(z, shape).copy()
    delta = np.broadcast_to(e, shape).copy()
    for k in range(inc.shape[0]):
        dW = inc[k]
        Fz = F(z)
        dF = F(z + delta) - Fz
        x, v = z[..., :d], z[..., d:]
        if scheme is Scheme.EM:
            z = np.concatenate([x + v * dt, v + Fz * dt + dW], axis=-1)
        else:
            z = np.concatenate([x + v * dt + 0.5 * dt * dW, v + dW + Fz * dt], axis=-1)
        dx, dv = delta[..., :d], delta[..., d:]
        delta = np.concatenate([dx + dv * dt, dv + dF * dt], axis=-1)
    return delta / h


def linear_flow_jacobian(T: float, d: int = 1) -> np.ndarray:
    """e^{TA} for A = [[0, I], [0, 0]]."""
    I = np.eye(d)
    return np.block([[I, T * I], [np.zeros((d, d)), I]])


def ito_residual(F, phi: Callable, grad_phi: Callable, lap_v_phi: Callable, z0, noise, dt: float, T: float | None = None) -> np.ndarray:
    """phi(Z_T) - phi(z0) - sum[(b . grad phi + 1/2 Lap_v phi) dt + grad_v phi . dW]
    along an Euler-Maruyama trajectory, with b(z) = (v, F(z))."""
    F = _F(F)
    z = as_phase_array(z0).astype(float)
    inc, T, _ = _noise(noise, dt, T)
    d = z.shape[-1] // 2
    z = np.broadcast_to(z, np.broadcast_shapes(z.shape[:-1], inc.shape[1:-1]) + z.shape[-1:]).copy()
    start = phi(z)
    acc = np.zeros(z.shape[:-1])
    for k in range(inc.shape[0]):
        dW = inc[k]
        g = grad_phi(z)
        b = np.concatenate([z[..., d:], F(z)], axis=-1)
        acc = acc + (np.sum(b * g, axis=-1) + 0.5 * lap_v_phi(z)) * dt + np.sum(g[..., d:] * dW, axis=-1)
        z = em_step(F, z, dW, dt)
    return phi(z) - start - acc
