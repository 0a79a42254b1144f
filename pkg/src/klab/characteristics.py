"""Deterministic characteristics of x' = v, v' = F(x, v).

Closed-form branches leaving the origin for the Holder drift
F = sign(x)|x|^alpha, fixed-step RK4, the reached set, coalescing pairs and
transport of an initial datum along backward characteristics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .core import CutoffSpec, DriftField, KlabError, PhasePoint, as_phase_array, make_drift

BETA_MAX = 1e3
VALIDITY_FACTOR = 0.9
NEAR_ORIGIN = 1e-4


class BranchDomainError(KlabError, ValueError):
    pass


class BranchOverflow(KlabError, OverflowError):
    """Exponent too close to 1: beta and the amplitude leave floating range."""


class OutsideValidity(KlabError):
    """Closed-form branch requested past its exit from the cutoff plateau."""


def branch_params(alpha: float) -> tuple[float, float]:
    """Return (beta, |A|) for the branches x = A t^beta of x'' = sign(x)|x|^alpha."""
    alpha = float(alpha)
    if not (0.5 <= alpha < 1.0):
        raise BranchDomainError(f"alpha must lie in [1/2, 1), got {alpha}")
    beta = 2.0 / (1.0 - alpha)
    log_a = (2.0 * math.log(1.0 - alpha) - math.log(2.0 * (1.0 + alpha))) / (1.0 - alpha)
    if beta > BETA_MAX or log_a < math.log(np.finfo(float).tiny):
        raise BranchOverflow(f"alpha={alpha} gives beta={beta:.4g}; amplitude underflows")
    return beta, math.exp(log_a)


@dataclass(frozen=True)
class BranchSolution:
    """t -> (A (t - t0)^beta, A beta (t - t0)^(beta - 1)) for t >= t0, zero before."""

    alpha: float
    t0: float = 0.0
    sign: int = 1
    cutoff: CutoffSpec = CutoffSpec()

    def __post_init__(self) -> None:
        if self.sign not in (1, -1):
            raise BranchDomainError("sign must be +1 or -1")
        if self.t0 < 0:
            raise BranchDomainError("onset time must be >= 0")
        branch_params(self.alpha)

    @property
    def beta(self) -> float:
        return branch_params(self.alpha)[0]

    @property
    def A(self) -> float:
        return self.sign * branch_params(self.alpha)[1]

    def state(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        s = np.clip(t - self.t0, 0.0, None)
        b, A = self.beta, self.A
        return np.stack([A * s**b, A * b * s ** (b - 1)], axis=-1)

    def acceleration(self, t) -> np.ndarray:
        s = np.clip(np.asarray(t, dtype=float) - self.t0, 0.0, None)
        b = self.beta
        return self.A * b * (b - 1) * s ** (b - 2)

    def valid_until(self) -> float:
        """First time the branch leaves the ball of radius 0.9 R_inner."""
        r = VALIDITY_FACTOR * self.cutoff.R_inner
        b, a = self.beta, abs(self.A)

        def excess(s):
            return math.hypot(a * s**b, a * b * s ** (b - 1)) - r

        hi = 1.0
        while excess(hi) < 0:
            hi *= 2.0
        return self.t0 + brentq(excess, 0.0, hi, xtol=1e-14)

    def residual(self, t) -> np.ndarray:
        """|v' - F(x, v)| along the branch with v' taken in closed form."""
        F = make_drift({"kind": "counterexample", "alpha": self.alpha, "cutoff": self.cutoff})
        z = self.state(t)
        return np.abs(self.acceleration(t) - F(z)[..., 0])


def branch_solution(b: BranchSolution, t) -> PhasePoint:
    t = float(t)
    if t > b.valid_until():
        raise OutsideValidity(f"t={t:g} is past the validity window ending at {b.valid_until():g}")
    return PhasePoint.from_array(b.state(t))


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    z: np.ndarray  # (n_times, ..., 2d)

    @property
    def end(self) -> np.ndarray:
        return self.z[-1]


def _as_callable(F) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(F, DriftField) or callable(F):
        return F
    return make_drift(F)


def integrate_ode(F, z0, T: float, dt: float, t_start: float = 0.0, keep: bool = True) -> Trajectory:
    """Classical fixed-step RK4 from time t_start to T (T < t_start runs backward).

    ``z0`` may carry leading batch axes. The step is shrunk uniformly so an
    integer number of steps lands exactly on T.
    """
    if not dt > 0:
        raise KlabError("dt must be positive")
    F = _as_callable(F)
    z = as_phase_array(z0).astype(float).copy()
    d = z.shape[-1] // 2
    span = T - t_start
    n = max(1, int(math.ceil(abs(span) / dt - 1e-9)))
    h = span / n

    def rhs(w):
        return np.concatenate([w[..., d:], F(w)], axis=-1)

    zs = [z.copy()] if keep else None
    for _ in range(n):
        k1 = rhs(z)
        k2 = rhs(z + 0.5 * h * k1)
        k3 = rhs(z + 0.5 * h * k2)
        k4 = rhs(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if keep:
            zs.append(z.copy())
    times = t_start + h * np.arange(n + 1)
    if not keep:
        return Trajectory(times[[0, -1]], np.stack([as_phase_array(z0), z]))
    return Trajectory(times, np.stack(zs))


def seeded_branch_start(alpha: float, eps: float, sign: int = 1) -> np.ndarray:
    """State of the t0 = 0 branch at time eps; start RK4 there to follow it."""
    return BranchSolution(alpha, 0.0, sign).state(eps)


@dataclass(frozen=True)
class NonUniquenessRun:
    zero: Trajectory
    branch: Trajectory
    exact: np.ndarray

    def separation(self) -> np.ndarray:
        return np.linalg.norm(self.branch.z - self.zero.z, axis=-1)

    def tracking_error(self) -> float:
        return float(np.abs(self.branch.z - self.exact).max())


def nonuniqueness_run(alpha: float, T: float, eps: float = 1e-6, dt: float = 1e-3) -> NonUniquenessRun:
    """Two RK4 solutions from (0, 0): the rest state, and the analytic branch
    picked up at time eps. Both are reported on the same grid [eps, T]."""
    F = make_drift({"kind": "counterexample", "alpha": alpha})
    b = BranchSolution(alpha)
    zero = integrate_ode(F, np.zeros(2), T, dt, t_start=eps)
    branch = integrate_ode(F, b.state(eps), T, dt, t_start=eps)
    return NonUniquenessRun(zero, branch, b.state(branch.t))


def reached_set(alpha: float, t: float, n_onsets: int = 201) -> np.ndarray:
    """Points reached at time t from (0, 0): both sign branches with onset
    times spread uniformly over [0, t]. Shape (2 n_onsets, 2)."""
    onsets = np.linspace(0.0, t, n_onsets)
    pts = [BranchSolution(alpha, float(t0), s).state(t) for s in (1, -1) for t0 in onsets]
    return np.array(pts)


def coalescing_pair(alpha: float, t0: float) -> tuple[PhasePoint, PhasePoint]:
    """Two distinct states whose forward characteristics meet at (0, 0) at time t0."""
    beta, a = branch_params(alpha)
    p = np.array([a * t0**beta, -a * beta * t0 ** (beta - 1)])
    return PhasePoint.from_array(p), PhasePoint.from_array(-p)


def deterministic_transport_eval(
    f0: Callable[[np.ndarray], np.ndarray],
    F,
    t: float,
    z,
    dt: float = 1e-3,
    delta: float = NEAR_ORIGIN,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate f(t, z) = f0(backward characteristic from (t, z) at time 0).

    Returns (values, flags); the flag is set when the backward path passes
    within ``delta`` of the origin, where the RK4 selection among backward
    solutions is arbitrary.
    """
    traj = integrate_ode(F, z, 0.0, dt, t_start=t)
    values = np.asarray(f0(traj.end), dtype=float)
    flags = np.any(np.linalg.norm(traj.z, axis=-1) < delta, axis=0)
    return values, flags


def write_trajectory_csv(path: str | Path, traj: Trajectory, branch_id: int | str = 0) -> None:
    z = traj.z.reshape(len(traj.t), -1)
    d = z.shape[-1] // 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)] + ["branch_id"])
        for t, row in zip(traj.t, z):
            w.writerow([repr(float(t))] + [repr(float(a)) for a in row] + [branch_id])
