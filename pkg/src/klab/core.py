"""Shared value types: phase points, drift catalog, lattice functions, noise paths.

Phase-space arrays always carry the 2d coordinates on their last axis, ordered
x-block first then v-block: ``z[..., :d]`` is position, ``z[..., d:]`` velocity.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np


class KlabError(Exception):
    pass


class DriftSpecError(KlabError, ValueError):
    """Raised for malformed drift descriptors or out-of-range parameters."""


class Boundary(str, enum.Enum):
    PERIODIC = "periodic"
    ZERO = "zero"
    # cubic continuation beyond the box; keeps low-degree polynomial data exact
    EXTRAPOLATED = "extrapolated"

    @classmethod
    def parse(cls, value: "Boundary | str") -> "Boundary":
        if isinstance(value, Boundary):
            return value
        aliases = {"zeroextended": "zero", "zero_extended": "zero"}
        key = str(value).lower()
        return cls(aliases.get(key, key))


# ---------------------------------------------------------------------------
# phase points


@dataclass(frozen=True)
class PhasePoint:
    x: tuple[float, ...]
    v: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.x) != len(self.v) or len(self.x) < 1:
            raise ValueError("x and v must have the same dimension d >= 1")
        if not np.all(np.isfinite(self.x + self.v)):
            raise ValueError("phase point components must be finite")

    @property
    def d(self) -> int:
        return len(self.x)

    def as_array(self) -> np.ndarray:
        return np.array(self.x + self.v, dtype=float)

    @classmethod
    def from_array(cls, z: Sequence[float]) -> "PhasePoint":
        z = np.asarray(z, dtype=float).ravel()
        if z.size % 2:
            raise ValueError("phase-space vector must have even length")
        d = z.size // 2
        return cls(tuple(z[:d].tolist()), tuple(z[d:].tolist()))


def split_xv(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    d = z.shape[-1] // 2
    return z[..., :d], z[..., d:]


def as_phase_array(z) -> np.ndarray:
    if isinstance(z, PhasePoint):
        return z.as_array()
    return np.asarray(z, dtype=float)


# ---------------------------------------------------------------------------
# smooth cutoff


@dataclass(frozen=True)
class CutoffSpec:
    R_inner: float = 2.0
    R_outer: float = 4.0

    def __post_init__(self) -> None:
        if not (0.0 < self.R_inner < self.R_outer):
            raise DriftSpecError(
                f"cutoff requires 0 < R_inner < R_outer, got {self.R_inner}, {self.R_outer}"
            )

    def to_dict(self) -> dict:
        return {"R_inner": self.R_inner, "R_outer": self.R_outer}


def _psi(u: np.ndarray) -> np.ndarray:
    # exp(-1/u) for u > 0, 0 otherwise
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def _dpsi(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos]) / u[pos] ** 2
    return out


def _smoothstep_down(s: np.ndarray) -> np.ndarray:
    """C-infinity transition from 1 (s <= 0) to 0 (s >= 1)."""
    a = _psi(1.0 - s)
    b = _psi(s)
    return a / (a + b)


def _smoothstep_down_derivative(s: np.ndarray) -> np.ndarray:
    a, b = _psi(1.0 - s), _psi(s)
    da, db = -_dpsi(1.0 - s), _dpsi(s)
    den = a + b
    return (da * b - a * db) / den**2


def smooth_cutoff(spec: CutoffSpec, z) -> np.ndarray:
    """Radial bump theta(|z|): 1 on the inner ball, 0 outside the outer ball."""
    r = np.linalg.norm(as_phase_array(z), axis=-1)
    s = (r - spec.R_inner) / (spec.R_outer - spec.R_inner)
    return _smoothstep_down(np.asarray(s, dtype=float))


def smooth_cutoff_gradient(spec: CutoffSpec, z) -> np.ndarray:
    z = as_phase_array(z)
    r = np.linalg.norm(z, axis=-1)
    width = spec.R_outer - spec.R_inner
    s = (r - spec.R_inner) / width
    dr = _smoothstep_down_derivative(np.asarray(s, dtype=float)) / width
    safe_r = np.where(r > 0, r, 1.0)
    return (dr / safe_r)[..., None] * z


# ---------------------------------------------------------------------------
# lattice functions


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Scalar or vector field sampled on the lattice of a symmetric box.

    Axis ``k`` has nodes ``-L[k] + j * 2 L[k] / n[k]`` for ``j < n[k]``. A
    trailing axis beyond the 2d lattice axes holds vector components.
    """

    L: tuple[float, ...]
    n: tuple[int, ...]
    values: np.ndarray
    boundary: Boundary = Boundary.ZERO

    def __post_init__(self) -> None:
        L = tuple(float(a) for a in np.broadcast_to(self.L, (len(self.n),)))
        n = tuple(int(a) for a in self.n)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "boundary", Boundary.parse(self.boundary))
        if len(n) % 2:
            raise ValueError("a phase-space lattice needs an even number of axes")
        if any(k < 8 for k in n):
            raise ValueError("at least 8 samples per axis are required")
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[: len(n)] != n or vals.ndim > len(n) + 1:
            raise ValueError(f"values shape {vals.shape} does not match lattice {n}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def d(self) -> int:
        return len(self.n) // 2

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == len(self.n) + 1

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(2 * a / k for a, k in zip(self.L, self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list[np.ndarray]:
        return lattice_axes(self.L, self.n)

    def mesh(self) -> np.ndarray:
        return lattice_points(self.L, self.n)

    def with_values(self, values: np.ndarray, boundary: Boundary | None = None) -> "GridFunction":
        return GridFunction(self.L, self.n, values, self.boundary if boundary is None else boundary)

    @classmethod
    def sample(cls, func: Callable[[np.ndarray], np.ndarray], L, n, boundary=Boundary.ZERO) -> "GridFunction":
        n = tuple(int(a) for a in np.atleast_1d(n))
        L = tuple(float(a) for a in np.broadcast_to(L, (len(n),)))
        pts = lattice_points(L, n)
        return cls(L, n, np.asarray(func(pts), dtype=float), boundary)

    # on-disk format: one JSON header line, then little-endian float64 payload
    def save(self, path: str | Path) -> None:
        header = {
            "format": "klab-grid/1",
            "d": self.d,
            "box": list(self.L),
            "n": list(self.n),
            "shape": list(self.values.shape),
            "boundary": self.boundary.value,
        }
        payload = np.ascontiguousarray(self.values, dtype="<f8").tobytes()
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(payload)

    @classmethod
    def load(cls, path: str | Path) -> "GridFunction":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            payload = fh.read()
        if header.get("format") != "klab-grid/1":
            raise KlabError(f"unrecognised grid file format in {path}")
        vals = np.frombuffer(payload, dtype="<f8").reshape(header["shape"]).astype(float)
        return cls(tuple(header["box"]), tuple(header["n"]), vals, Boundary.parse(header["boundary"]))


def lattice_axes(L: Sequence[float], n: Sequence[int]) -> list[np.ndarray]:
    return [-a + (2 * a / k) * np.arange(k) for a, k in zip(L, n)]


def lattice_points(L: Sequence[float], n: Sequence[int]) -> np.ndarray:
    grids = np.meshgrid(*lattice_axes(L, n), indexing="ij")
    return np.stack(grids, axis=-1)


def default_lattice(d: int = 1, L: float = 8.0, n: int = 256) -> tuple[tuple[float, ...], tuple[int, ...]]:
    return (float(L),) * (2 * d), (int(n),) * (2 * d)


# ---------------------------------------------------------------------------
# drift catalog


class DriftKind(str, enum.Enum):
    ZERO = "zero"
    CONSTANT = "constant"
    PRODUCT = "product"
    COUNTEREXAMPLE = "counterexample"
    GRID = "grid"
    CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class DriftField:
    """Force field F: R^{2d} -> R^d.

    Call it on an array of phase points of shape ``(..., 2d)``; the result has
    shape ``(..., d)``.
    """

    kind: DriftKind
    d: int = 1
    c: tuple[float, ...] | None = None
    alpha: float | None = None
    sign: int = 1
    cutoff: CutoffSpec | None = None
    phi: Callable[[np.ndarray], np.ndarray] | None = None
    G: Callable[[np.ndarray], np.ndarray] | None = None
    grid: GridFunction | None = None
    func: Callable[[np.ndarray], np.ndarray] | None = None
    label: str = ""
    _interp: object = field(default=None, repr=False)

    def __call__(self, z) -> np.ndarray:
        z = as_phase_array(z)
        d = self.d
        if z.shape[-1] != 2 * d:
            raise ValueError(f"expected phase points of dimension {2 * d}, got {z.shape[-1]}")
        x, v = z[..., :d], z[..., d:]
        kind = self.kind
        if kind is DriftKind.ZERO:
            return np.zeros(z.shape[:-1] + (d,))
        if kind is DriftKind.CONSTANT:
            return np.broadcast_to(np.asarray(self.c, dtype=float), z.shape[:-1] + (d,)).copy()
        if kind is DriftKind.PRODUCT:
            # F_i(x, v) = phi(v_i) G(x_i)
            return self.phi(v) * self.G(x)
        if kind is DriftKind.COUNTEREXAMPLE:
            theta = smooth_cutoff(self.cutoff, z)[..., None]
            return self.sign * theta * np.sign(x) * np.abs(x) ** self.alpha
        if kind is DriftKind.GRID:
            return self._grid_eval(z)
        if kind is DriftKind.CUSTOM:
            return np.asarray(self.func(z), dtype=float)
        raise DriftSpecError(f"unknown drift kind {kind}")

    def _grid_eval(self, z: np.ndarray) -> np.ndarray:
        from scipy.interpolate import RegularGridInterpolator

        interp = self._interp
        if interp is None:
            g = self.grid
            interp = RegularGridInterpolator(
                g.axes(), g.values, method="linear", bounds_error=False, fill_value=0.0
            )
            object.__setattr__(self, "_interp", interp)
        out = interp(z.reshape(-1, z.shape[-1]))
        return out.reshape(z.shape[:-1] + (self.d,))

    def div_v(self, z) -> np.ndarray:
        """Velocity divergence sum_i dF_i/dv_i (closed form where available)."""
        z = as_phase_array(z)
        d = self.d
        if self.kind in (DriftKind.ZERO, DriftKind.CONSTANT):
            return np.zeros(z.shape[:-1])
        if self.kind is DriftKind.COUNTEREXAMPLE:
            x = z[..., :d]
            grad = smooth_cutoff_gradient(self.cutoff, z)[..., d:]
            core = self.sign * np.sign(x) * np.abs(x) ** self.alpha
            return np.sum(core * grad, axis=-1)
        h = 1e-5
        total = np.zeros(z.shape[:-1])
        for i in range(d):
            e = np.zeros(2 * d)
            e[d + i] = h
            total += (self(z + e)[..., i] - self(z - e)[..., i]) / (2 * h)
        return total

    def describe(self) -> dict:
        out: dict = {"kind": self.kind.value, "d": self.d}
        if self.c is not None:
            out["c"] = list(self.c)
        if self.kind is DriftKind.COUNTEREXAMPLE:
            out.update(alpha=self.alpha, sign=self.sign, cutoff=self.cutoff.to_dict())
        if self.label:
            out["label"] = self.label
        return out

    @classmethod
    def from_callable(cls, func: Callable[[np.ndarray], np.ndarray], d: int = 1, label: str = "") -> "DriftField":
        return cls(DriftKind.CUSTOM, d=d, func=func, label=label)


def make_drift(spec: Mapping | DriftField) -> DriftField:
    """Build a drift from a descriptor such as ``{"kind": "counterexample", "alpha": 0.6}``."""
    if isinstance(spec, DriftField):
        return spec
    spec = dict(spec)
    try:
        kind = DriftKind(str(spec.pop("kind")).lower())
    except (KeyError, ValueError) as exc:
        raise DriftSpecError(f"drift descriptor needs a valid 'kind': {exc}") from None
    d = int(spec.pop("d", 1))
    if d < 1:
        raise DriftSpecError("dimension d must be >= 1")
    if kind is DriftKind.ZERO:
        return DriftField(kind, d=d)
    if kind is DriftKind.CONSTANT:
        c = np.broadcast_to(np.asarray(spec.get("c", 0.0), dtype=float), (d,))
        return DriftField(kind, d=d, c=tuple(float(a) for a in c))
    if kind is DriftKind.PRODUCT:
        phi, G = spec.get("phi"), spec.get("G")
        if not (callable(phi) and callable(G)):
            raise DriftSpecError("product drift needs callables 'phi' and 'G'")
        return DriftField(kind, d=d, phi=phi, G=G, label=spec.get("label", ""))
    if kind is DriftKind.COUNTEREXAMPLE:
        alpha = float(spec.get("alpha", 0.6))
        if not (0.5 < alpha < 1.0):
            raise DriftSpecError(f"counterexample exponent alpha must lie in (1/2, 1), got {alpha}")
        sign = int(spec.get("sign", 1))
        if sign not in (1, -1):
            raise DriftSpecError("sign must be +1 or -1")
        cut = spec.get("cutoff", {})
        if isinstance(cut, CutoffSpec):
            cutoff = cut
        else:
            cutoff = CutoffSpec(float(cut.get("R_inner", 2.0)), float(cut.get("R_outer", 4.0)))
        return DriftField(kind, d=d, alpha=alpha, sign=sign, cutoff=cutoff)
    if kind is DriftKind.GRID:
        g = spec.get("grid")
        if not isinstance(g, GridFunction):
            raise DriftSpecError("grid drift needs a GridFunction under 'grid'")
        if g.d != d:
            raise DriftSpecError("grid dimension does not match d")
        return DriftField(kind, d=d, grid=g)
    func = spec.get("func")
    if not callable(func):
        raise DriftSpecError("custom drift needs a callable 'func'")
    return DriftField(kind, d=d, func=func, label=spec.get("label", ""))


# ---------------------------------------------------------------------------
# noise


def derive_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(index),))


def make_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based generator for stream ``index`` of a master seed."""
    return np.random.Generator(np.random.Philox(derive_seed(seed, index)))


def _step_count(T: float, dt: float) -> int:
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    m = T / dt
    k = int(round(m))
    if k < 1 or abs(m - k) > 1e-9 * max(1.0, m):
        raise ValueError(f"T/dt = {m} is not an integer")
    return k


@dataclass(frozen=True, eq=False)
class NoisePath:
    """One d-dimensional Brownian path stored as base-resolution increments."""

    seed: int
    T: float
    dt_base: float
    d: int = 1
    index: int = 0
    increments: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        steps = _step_count(self.T, self.dt_base)
        if self.increments is None:
            rng = make_rng(self.seed, self.index)
            inc = rng.standard_normal((steps, self.d)) * np.sqrt(self.dt_base)
        else:
            inc = np.asarray(self.increments, dtype=float)
            if inc.shape != (steps, self.d):
                raise ValueError("increment array does not match T/dt_base")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    def coarsen(self, k: int) -> "NoisePath":
        if k < 1 or self.n_steps % k:
            raise ValueError(f"coarsening factor {k} must divide {self.n_steps}")
        inc = self.increments.reshape(self.n_steps // k, k, self.d).sum(axis=1)
        return NoisePath(self.seed, self.T, self.dt_base * k, self.d, self.index, inc)

    def at_step(self, dt: float) -> "NoisePath":
        k = _step_count(dt, self.dt_base)
        return self.coarsen(k)

    def W(self) -> np.ndarray:
        """Path values at the grid times, starting with W_0 = 0."""
        return np.vstack([np.zeros((1, self.d)), np.cumsum(self.increments, axis=0)])

    def times(self) -> np.ndarray:
        return self.dt_base * np.arange(self.n_steps + 1)

    def to_dict(self) -> dict:
        return {"seed": int(self.seed), "T": self.T, "dt_base": self.dt_base, "d": self.d, "index": self.index}

    @classmethod
    def from_dict(cls, data: Mapping) -> "NoisePath":
        return cls(int(data["seed"]), float(data["T"]), float(data["dt_base"]), int(data.get("d", 1)), int(data.get("index", 0)))

    def identity(self) -> str:
        return f"{self.seed}:{self.index}@{self.dt_base:g}"


def brownian_path(seed: int, T: float, dt_base: float, d: int = 1, index: int = 0) -> NoisePath:
    return NoisePath(seed, T, dt_base, d, index)


def brownian_increments(seed: int, T: float, dt: float, d: int, n_paths: int, start: int = 0) -> np.ndarray:
    """Increments of paths ``start .. start+n_paths-1``, shape ``(n_steps, n_paths, d)``.

    Path ``i`` coincides with ``brownian_path(seed, T, dt, d, index=i)``.
    """
    steps = _step_count(T, dt)
    out = np.empty((steps, n_paths, d))
    sq = np.sqrt(dt)
    for j in range(n_paths):
        out[:, j, :] = make_rng(seed, start + j).standard_normal((steps, d)) * sq
    return out


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
