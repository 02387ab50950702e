"""Deterministic mean-field kinetics of the CO-oxidation surface model.

Two coverages (theta_A for CO, theta_B for O) evolve under adsorption,
desorption, dissociative O2 adsorption and surface reaction:

    dtheta_A/dt = alpha (1 - theta_A - theta_B) - gamma theta_A - 4 k_r theta_A theta_B
    dtheta_B/dt = 2 beta (1 - theta_A - theta_B)^2 - 4 k_r theta_A theta_B

This module is both a simulator (the deterministic coarse timestepper) and
the ground-truth oracle for the stochastic lattice model: analytic
Jacobian, eigenvalues, a damped Newton fixed-point solver, and a
multistart branch scan with fold refinement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .coarse import CoarseState, Simulator
from ._rng import numpy_rng

__all__ = [
    "MfParams",
    "FixedPoint",
    "rhs",
    "integrate",
    "jacobian",
    "eigenvalues",
    "newton_fixed_point",
    "branch_scan",
    "refine_fold",
    "MeanFieldSimulator",
]

STABLE_NODE = "stable_node"
SADDLE = "saddle"
OTHER = "other"

# |lambda| below this is treated as degenerate (fold vicinity)
_DEGENERATE_EIG = 1e-8
# equilibria with vacancy below this are the frozen fully-poisoned surface,
# not part of the reaction branch structure
_MIN_VACANCY = 1e-9


@dataclass(frozen=True)
class MfParams:
    """Rate constants, all in inverse time units."""

    alpha: float = 1.6
    beta: float = 4.0
    gamma: float = 0.04
    k_r: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "k_r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class FixedPoint:
    theta: tuple[float, float]
    stability: str
    eigenvalues: tuple[complex, complex]  # ordered |slow| <= |fast|

    @property
    def lambda_slow(self) -> complex:
        return self.eigenvalues[0]

    @property
    def lambda_fast(self) -> complex:
        return self.eigenvalues[1]


def rhs(theta, p: MfParams) -> tuple[float, float]:
    """Time derivatives (dtheta_A/dt, dtheta_B/dt)."""
    tA, tB = float(theta[0]), float(theta[1])
    v = 1.0 - tA - tB
    r = 4.0 * p.k_r * tA * tB
    return (p.alpha * v - p.gamma * tA - r, 2.0 * p.beta * v * v - r)


def jacobian(theta, p: MfParams) -> np.ndarray:
    """Analytic 2x2 Jacobian of rhs."""
    tA, tB = float(theta[0]), float(theta[1])
    v = 1.0 - tA - tB
    return np.array(
        [
            [-p.alpha - p.gamma - 4.0 * p.k_r * tB, -p.alpha - 4.0 * p.k_r * tA],
            [-4.0 * p.beta * v - 4.0 * p.k_r * tB, -4.0 * p.beta * v - 4.0 * p.k_r * tA],
        ]
    )


def eigenvalues(J) -> tuple[complex, complex]:
    """Closed-form eigenvalues of a real 2x2 matrix, ordered |slow| <= |fast|."""
    J = np.asarray(J, dtype=float)
    if J.shape != (2, 2):
        raise ValueError("expected a 2x2 matrix")
    tr = J[0, 0] + J[1, 1]
    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    disc = tr * tr - 4.0 * det
    if disc >= 0:
        s = np.sqrt(disc)
        lams = ((tr - s) / 2.0, (tr + s) / 2.0)
    else:
        s = np.sqrt(-disc)
        lams = (complex(tr / 2.0, -s / 2.0), complex(tr / 2.0, s / 2.0))
    lams = sorted(lams, key=abs)
    return (lams[0], lams[1])


def integrate(theta0, p: MfParams, horizon: float, dt: float = 1e-3) -> tuple[float, float]:
    """Classical 4th-order fixed-step integration; the last step is
    shortened to land exactly on the horizon."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    tA, tB = float(theta0[0]), float(theta0[1])
    t = 0.0
    while t < horizon - 1e-14:
        h = dt if t + dt <= horizon else horizon - t
        k1 = rhs((tA, tB), p)
        k2 = rhs((tA + 0.5 * h * k1[0], tB + 0.5 * h * k1[1]), p)
        k3 = rhs((tA + 0.5 * h * k2[0], tB + 0.5 * h * k2[1]), p)
        k4 = rhs((tA + h * k3[0], tB + h * k3[1]), p)
        tA += (h / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        tB += (h / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        t += h
        if not (np.isfinite(tA) and np.isfinite(tB)):
            raise FloatingPointError(f"integration diverged at t={t:g}")
    return (tA, tB)


def classify(theta, p: MfParams) -> FixedPoint:
    """Attach eigenvalues and a stability tag to an equilibrium."""
    lam_s, lam_f = eigenvalues(jacobian(theta, p))
    if isinstance(lam_s, complex) or isinstance(lam_f, complex):
        tag = OTHER
    elif abs(lam_s) < _DEGENERATE_EIG or abs(lam_f) < _DEGENERATE_EIG:
        tag = OTHER
    elif lam_s < 0 and lam_f < 0:
        tag = STABLE_NODE
    elif lam_s > 0 > lam_f:
        tag = SADDLE
    else:
        tag = OTHER
    return FixedPoint((float(theta[0]), float(theta[1])), tag, (lam_s, lam_f))


def newton_fixed_point(
    guess,
    p: MfParams,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> FixedPoint:
    """Damped Newton iteration on rhs = 0 with the analytic Jacobian.

    The step is halved until the residual decreases; failure to converge or
    a singular Jacobian raises with the iteration trace in the message.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    th = np.array([float(guess[0]), float(guess[1])])
    trace = []
    for _ in range(max_iter):
        f = np.array(rhs(th, p))
        res = np.max(np.abs(f))
        trace.append((th.copy(), res))
        if res <= tol:
            return classify(th, p)
        J = jacobian(th, p)
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            raise RuntimeError(f"singular Jacobian at theta={tuple(th)}")
        lam = 1.0
        while lam > 1e-12:
            trial = th + lam * step
            if np.max(np.abs(rhs(trial, p))) < res:
                break
            lam *= 0.5
        th = th + lam * step
    hist = ", ".join(f"{r:.2e}" for _, r in trace[-5:])
    raise RuntimeError(f"Newton did not converge in {max_iter} iterations (residuals ... {hist})")


def _simplex_grid(n: int = 21) -> Iterable[tuple[float, float]]:
    for a in np.linspace(0.0, 1.0, n):
        for b in np.linspace(0.0, 1.0, n):
            if a + b <= 1.0 + 1e-12:
                yield (float(a), float(b))


def find_fixed_points(p: MfParams, grid_n: int = 21, dedup: float = 1e-6) -> list[FixedPoint]:
    """Multistart Newton over a simplex lattice of initial guesses.

    Returns deduplicated equilibria inside the physical simplex, sorted by
    theta_A. The fully poisoned surface (zero vacancy) is excluded: it is
    an absorbing frozen state whose unstable direction points out of the
    simplex.
    """
    found: list[np.ndarray] = []
    for guess in _simplex_grid(grid_n):
        try:
            fp = newton_fixed_point(guess, p, tol=1e-12, max_iter=60)
        except RuntimeError:
            continue
        th = np.array(fp.theta)
        if th[0] < -1e-9 or th[1] < -1e-9 or th[0] + th[1] > 1.0 + 1e-9:
            continue
        if 1.0 - th[0] - th[1] <= _MIN_VACANCY:
            continue
        if any(np.max(np.abs(th - o)) < dedup for o in found):
            continue
        found.append(th)
    found.sort(key=lambda t: t[0])
    return [classify(t, p) for t in found]


def _with_param(p: MfParams, name: str, value: float) -> MfParams:
    from dataclasses import replace

    return replace(p, **{name: value})


def refine_fold(
    p_base: MfParams,
    name: str,
    lo: float,
    hi: float,
    grid_n: int = 21,
    width: float = 1e-6,
) -> float:
    """Bisect a parameter interval across which the equilibrium count
    changes, down to the requested width; returns the midpoint."""
    n_lo = len(find_fixed_points(_with_param(p_base, name, lo), grid_n))
    n_hi = len(find_fixed_points(_with_param(p_base, name, hi), grid_n))
    if n_lo == n_hi:
        raise ValueError(f"no fold in [{lo}, {hi}] for {name} (count {n_lo} at both ends)")
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if len(find_fixed_points(_with_param(p_base, name, mid), grid_n)) == n_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class BranchScan:
    parameter: str
    grid: tuple[float, ...]
    points: tuple[tuple[float, FixedPoint], ...]  # (parameter value, fixed point)
    folds: tuple[float, ...]

    def at(self, value: float) -> list[FixedPoint]:
        return [fp for v, fp in self.points if v == value]


def branch_scan(
    p_base: MfParams,
    name: str,
    grid: Sequence[float],
    grid_n: int = 21,
    refine: bool = True,
) -> BranchScan:
    """Fixed points along a parameter sweep, with fold locations bracketed
    by count changes between adjacent grid values and refined by bisection.
    """
    grid = [float(g) for g in grid]
    if len(grid) >= 2:
        diffs = np.diff(grid)
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("grid must be strictly monotone")
    points: list[tuple[float, FixedPoint]] = []
    counts: list[int] = []
    for g in grid:
        fps = find_fixed_points(_with_param(p_base, name, g), grid_n)
        counts.append(len(fps))
        points.extend((g, fp) for fp in fps)
    folds: list[float] = []
    for i in range(len(grid) - 1):
        if counts[i] != counts[i + 1]:
            if refine:
                lo, hi = sorted((grid[i], grid[i + 1]))
                folds.append(refine_fold(p_base, name, lo, hi, grid_n))
            else:
                folds.append(0.5 * (grid[i] + grid[i + 1]))
    return BranchScan(name, tuple(grid), tuple(points), tuple(folds))


def write_branch_csv(path, scan: BranchScan) -> None:
    """(parameter, theta_A, theta_B, lambda_slow, lambda_fast, stability) rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([scan.parameter, "theta_A", "theta_B", "lambda_slow", "lambda_fast", "stability"])
        for value, fp in scan.points:
            w.writerow(
                [
                    f"{value:.17g}",
                    f"{fp.theta[0]:.17g}",
                    f"{fp.theta[1]:.17g}",
                    f"{fp.lambda_slow.real:.17g}",
                    f"{fp.lambda_fast.real:.17g}",
                    fp.stability,
                ]
            )


def write_fold_csv(path, p_base: MfParams, name: str, folds: Sequence[float], grid_n: int = 21) -> None:
    """(parameter_at_fold, theta_A, theta_B) rows; theta is the nearly
    degenerate equilibrium just inside the fold."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter_at_fold", "theta_A", "theta_B"])
        for f in folds:
            best = None
            for side in (-2e-6, 2e-6):
                fps = find_fixed_points(_with_param(p_base, name, f + side), grid_n)
                for fp in fps:
                    lam = abs(fp.lambda_slow)
                    if best is None or lam < best[0]:
                        best = (lam, fp)
            if best is not None:
                w.writerow([f"{f:.17g}", f"{best[1].theta[0]:.17g}", f"{best[1].theta[1]:.17g}"])


class MeanFieldSimulator(Simulator):
    """The mean-field model wrapped as a (deterministic) microscopic
    simulator; its MicroState is just the coverage pair."""

    labels = ("theta_A", "theta_B")
    is_stochastic = False
    quantization_error = 0.0

    def __init__(self, dt: float = 1e-3):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = dt

    def make_rng(self, seed: int):
        return numpy_rng(seed)  # unused, present for contract uniformity

    def lift(self, x: CoarseState, params, rng) -> tuple[float, float]:
        return (x[0], x[1])

    def evolve(self, micro, params, horizon: float, rng) -> tuple[float, float]:
        if horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if horizon == 0:
            return (micro[0], micro[1])
        return integrate(micro, params, horizon, self.dt)

    def restrict(self, micro) -> CoarseState:
        return self.coarse_state([micro[0], micro[1]])

    def validate_params(self, params) -> None:
        if not isinstance(params, MfParams):
            raise ValueError("expected MfParams")

    def param_bounds(self, name: str) -> tuple[float, float]:
        if name in ("alpha", "beta", "gamma", "k_r"):
            return (0.0, np.inf)
        raise ValueError(f"unknown parameter {name!r}")
