"""Free kinetic (hypoelliptic Ornstein-Uhlenbeck) dynamics: exact transition law
and the action of the semigroup P_t on lattice functions.

On a lattice P_t is applied through the exact factorisation

    P_t = S(t/2) o B_v(t) o S(t/2) o B_x(t^3/12)

where S(c) g(x, v) = g(x + c v, v) is a shear and B_x, B_v are one-dimensional
Gaussian blurs with the stated variances along the x and v axes. The
composition reproduces the covariance blocks t^3/3, t^2/2, t exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Boundary, GridFunction, KlabError, as_phase_array

SMALL_T = 1e-6


class CoarseGridWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class OuTransition:
    t: float
    d: int
    cov: np.ndarray
    chol: np.ndarray | None
    logdet: float

    def mean_map(self, z) -> np.ndarray:
        return ou_mean(self.t, z)


def ou_mean(t: float, z) -> np.ndarray:
    """e^{tA} z = (x + t v, v)."""
    z = as_phase_array(z)
    d = z.shape[-1] // 2
    out = np.array(z, dtype=float, copy=True)
    out[..., :d] += t * z[..., d:]
    return out


def _blocks(t: float) -> tuple[float, float, float]:
    return t**3 / 3.0, t**2 / 2.0, t


def ou_covariance(t: float, d: int = 1) -> OuTransition:
    if t < 0:
        raise KlabError(f"covariance undefined for negative time t={t}")
    a, b, c = _blocks(t)
    eye = np.eye(d)
    cov = np.kron(np.array([[a, b], [b, c]]), eye)
    if t < SMALL_T:
        return OuTransition(t, d, cov, None, -math.inf if t == 0 else d * math.log(t**4 / 12.0))
    # closed-form Cholesky of [[t^3/3, t^2/2], [t^2/2, t]]
    l11 = math.sqrt(a)
    l21 = b / l11
    l22 = math.sqrt(t) / 2.0
    chol = np.kron(np.array([[l11, 0.0], [l21, l22]]), eye)
    logdet = d * (4.0 * math.log(t) - math.log(12.0))
    return OuTransition(t, d, cov, chol, logdet)


def ou_sample(z, t: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from N(e^{tA} z, Q_t); below the small-t floor only the mean map is used."""
    z = as_phase_array(z)
    d = z.shape[-1] // 2
    mean = ou_mean(t, z)
    tr = ou_covariance(t, d)
    if tr.chol is None:
        return mean if size is None else np.broadcast_to(mean, (size,) + mean.shape).copy()
    shape = mean.shape if size is None else (size,) + mean.shape
    noise = rng.standard_normal(shape)
    return mean + noise @ tr.chol.T


def ou_density(t: float, z, z_prime) -> np.ndarray:
    if t <= 0:
        raise KlabError("transition density requires t > 0")
    z = as_phase_array(z)
    zp = as_phase_array(z_prime)
    d = z.shape[-1] // 2
    diff = zp - ou_mean(t, z)
    dx, dv = diff[..., :d], diff[..., d:]
    a, b, c = _blocks(t)
    det2 = t**4 / 12.0
    quad = np.sum(c * dx**2 - 2 * b * dx * dv + a * dv**2, axis=-1) / det2
    return np.exp(-0.5 * quad) / ((2 * math.pi) ** d * det2 ** (d / 2.0))


# ---------------------------------------------------------------------------
# one-dimensional lattice operators


def _lagrange_weights(u: np.ndarray) -> tuple[np.ndarray, ...]:
    w0 = -(u - 1) * (u - 2) * (u - 3) / 6.0
    w1 = u * (u - 2) * (u - 3) / 2.0
    w2 = -u * (u - 1) * (u - 3) / 2.0
    w3 = u * (u - 1) * (u - 2) / 6.0
    return w0, w1, w2, w3


_FIT_WINDOW = 32


def _end_fit(b: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    # least-squares cubic through the last m samples at each end, in the
    # scaled coordinate s = (index - anchor) / m
    s = np.arange(m, dtype=float) / m
    V = np.vander(s, 4, increasing=True)
    P = np.linalg.pinv(V)
    left = b[..., :m] @ P.T
    right = b[..., -m:][..., ::-1] @ P.T
    return left, right


def _poly_eval(coef: np.ndarray, s: np.ndarray) -> np.ndarray:
    return coef[..., 0:1] + s * (coef[..., 1:2] + s * (coef[..., 2:3] + s * coef[..., 3:4]))


def interp_along(a: np.ndarray, axis: int, q: np.ndarray, boundary: Boundary) -> np.ndarray:
    """Evaluate samples of ``a`` along ``axis`` at fractional indices ``q``.

    Inside the samples: four-point Lagrange interpolation (exact on cubics).
    Outside: 0 for ZERO, for EXTRAPOLATED a least-squares cubic fitted to the
    nearest end window (also exact on cubics, and well conditioned far out).
    ``q`` must broadcast against ``a`` once ``axis`` is moved last.
    """
    b = np.moveaxis(a, axis, -1)
    n = b.shape[-1]
    q = np.broadcast_to(q, b.shape[:-1] + (np.shape(q)[-1],))
    i0 = np.floor(q).astype(np.int64) - 1
    if boundary is Boundary.EXTRAPOLATED:
        i0 = np.clip(i0, 0, n - 4)
    u = q - i0
    ws = _lagrange_weights(u)
    out = np.zeros(q.shape)
    bb = np.broadcast_to(b, q.shape[:-1] + (n,))
    for k, w in enumerate(ws):
        idx = i0 + k
        if boundary is Boundary.ZERO:
            valid = (idx >= 0) & (idx < n)
            vals = np.take_along_axis(bb, np.clip(idx, 0, n - 1), axis=-1)
            out += np.where(valid, w * vals, 0.0)
        else:
            out += w * np.take_along_axis(bb, idx, axis=-1)
    if boundary is Boundary.EXTRAPOLATED:
        lo, hi = q < 0, q > n - 1
        if lo.any() or hi.any():
            m = min(_FIT_WINDOW, n)
            left, right = _end_fit(bb, m)
            out = np.where(lo, _poly_eval(left, q / m), out)
            out = np.where(hi, _poly_eval(right, (n - 1 - q) / m), out)
    return np.moveaxis(out, -1, axis)


def _blur_kernel(r: float) -> np.ndarray:
    """Symmetric unit-mass lattice kernel with variance ``r`` (cells^2).

    Small r: five-point kernel matching the Gaussian's second and fourth
    moments. Larger r: sampled Gaussian, variance corrected to be exact.
    Either way quadratic data are blurred exactly.
    """
    if r <= 1.0:
        a = (3 * r * r - r) / 24.0
        b = (4 * r - 3 * r * r) / 6.0
        return np.array([a, b, 1 - 2 * a - 2 * b, b, a])
    J = int(math.ceil(10.0 * math.sqrt(r) + 2))
    j = np.arange(-J, J + 1, dtype=float)
    k = np.exp(-0.5 * j**2 / r)
    k /= k.sum()
    delta = r - float(np.sum(k * j**2))
    k[J - 1] += 0.5 * delta
    k[J] -= delta
    k[J + 1] += 0.5 * delta
    return k


def shear_along(a: np.ndarray, axis: int, shift: np.ndarray, h: float, boundary: Boundary) -> np.ndarray:
    """Return g(x + shift) along ``axis``; ``shift`` broadcasts against ``a``."""
    if boundary is Boundary.PERIODIC:
        n = a.shape[axis]
        xi = 2 * np.pi * np.fft.rfftfreq(n, d=h)
        shape = [1] * a.ndim
        shape[axis] = xi.size
        xi = xi.reshape(shape)
        spec = np.fft.rfft(a, axis=axis)
        return np.fft.irfft(spec * np.exp(1j * xi * shift), n=n, axis=axis)
    n = a.shape[axis]
    base = np.arange(n, dtype=float).reshape([n if k == axis else 1 for k in range(a.ndim)])
    q = base + np.asarray(shift) / h
    q = np.broadcast_to(q, np.broadcast_shapes(q.shape, a.shape))
    return interp_along(a, axis, np.moveaxis(q, axis, -1), boundary)


def blur_along(a: np.ndarray, axis: int, var: float, h: float, boundary: Boundary) -> np.ndarray:
    """Convolve with a centred Gaussian of variance ``var`` along ``axis``."""
    if var <= 0:
        return a
    if boundary is Boundary.PERIODIC:
        n = a.shape[axis]
        xi = 2 * np.pi * np.fft.rfftfreq(n, d=h)
        shape = [1] * a.ndim
        shape[axis] = xi.size
        mult = np.exp(-0.5 * var * xi**2).reshape(shape)
        return np.fft.irfft(np.fft.rfft(a, axis=axis) * mult, n=n, axis=axis)
    r = var / h**2
    if r < 1e-14:
        return a
    kern = _blur_kernel(r)
    if boundary is Boundary.ZERO:
        return ndimage.convolve1d(a, kern, axis=axis, mode="constant", cval=0.0)
    J = kern.size // 2
    n = a.shape[axis]
    q = np.arange(-J, n + J, dtype=float)
    b = np.moveaxis(a, axis, -1)
    ext = interp_along(b, -1, np.broadcast_to(q, b.shape[:-1] + q.shape), boundary)
    conv = ndimage.convolve1d(ext, kern, axis=-1, mode="nearest")
    return np.moveaxis(conv[..., J : J + n], -1, axis)


# ---------------------------------------------------------------------------
# semigroup


def _apply_scalar(vals: np.ndarray, L, n, d: int, t: float, boundary: Boundary) -> np.ndarray:
    h = [2 * a / k for a, k in zip(L, n)]
    axes = [-a + hk * np.arange(k) for a, hk, k in zip(L, h, n)]
    pads = [0] * d
    if boundary is Boundary.ZERO:
        # room for mass that the intermediate shears push outside the box
        sx = math.sqrt(t**3 / 3.0)
        for i in range(d):
            need = (0.5 * t * L[d + i] + 8.0 * sx) / h[i] + 4
            pads[i] = int(min(math.ceil(need), 4 * n[i]))
        if any(pads):
            width = [(p, p) for p in pads] + [(0, 0)] * d
            vals = np.pad(vals, width)
            for i in range(d):
                axes[i] = -L[i] - pads[i] * h[i] + h[i] * np.arange(n[i] + 2 * pads[i])
    out = vals
    ndim = 2 * d
    for i in range(d):
        vshape = [1] * ndim
        vshape[d + i] = n[d + i]
        vcoord = axes[d + i].reshape(vshape)
        out = blur_along(out, i, t**3 / 12.0, h[i], boundary)
        out = shear_along(out, i, 0.5 * t * vcoord, h[i], boundary)
        out = blur_along(out, d + i, t, h[d + i], boundary)
        out = shear_along(out, i, 0.5 * t * vcoord, h[i], boundary)
    if any(pads):
        sl = tuple(slice(p, p + n[i]) for i, p in enumerate(pads)) + (slice(None),) * d
        out = out[sl]
    return out


def semigroup_apply(g: GridFunction, t: float, warn: bool = True) -> GridFunction:
    """P_t g(z) = E g(e^{tA} z + Y), Y ~ N(0, Q_t), evaluated on g's lattice."""
    if t < 0:
        raise KlabError("semigroup time must be non-negative")
    if t == 0:
        return g
    if warn:
        hmin = min(g.spacing)
        smallest = math.sqrt(t**3 / 12.0)
        if smallest < 0.25 * hmin:
            warnings.warn(
                f"lattice spacing {hmin:g} coarse relative to sqrt(Q_t) scale {smallest:g} at t={t:g}",
                CoarseGridWarning,
                stacklevel=2,
            )
    d = g.d
    if g.is_vector:
        comps = [_apply_scalar(g.values[..., k], g.L, g.n, d, t, g.boundary) for k in range(g.values.shape[-1])]
        return g.with_values(np.stack(comps, axis=-1))
    return g.with_values(_apply_scalar(g.values, g.L, g.n, d, t, g.boundary))
