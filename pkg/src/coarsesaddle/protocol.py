"""Iterative saddle-point search driven through a control offset on one
parameter.

Starting from a stable coarse state, the driver kicks the simulator past
the nearby fold by offsetting the control parameter by u0, then
repeatedly: (A) perturbs at the current action, (B) brackets the action
between 0 and the previous one, (C) chord-searches the bracket for the
offset at which the current microscopic snapshot shows no coarse drift,
(D) relaxes there, and (E) multiplies by a gain > 1 so the next
perturbation lands the state slightly on the far side of the shifted
saddle. The actions contract geometrically toward zero while the snapshot
walks along the unstable branch to the saddle of the nominal parameter.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .coarse import (
    CoarseState,
    EnsembleSpec,
    SimulationError,
    Simulator,
    drift_indicator,
    ensemble_restrict,
    estimate_noise_floor,
)

__all__ = [
    "ProtocolConfig",
    "ChordBracket",
    "SaddleResult",
    "chord_point",
    "evaluate_action",
    "inner_chord_search",
    "saddle_protocol",
    "estimate_critical_parameter",
]


@dataclass(frozen=True)
class ProtocolConfig:
    """All knobs of the saddle search.

    Fields left as None are resolved at protocol start: c = 0.5|u0|,
    tol1 = 0.005|u0| (raised to the noise floor for stochastic runs),
    tol2 = max(1e-6, noise_factor * sigma_h), tol3 = 0.01|u0|,
    T_r = T_s = T_min = T.

    With T_min < T the perturbation horizon is scaled down proportionally
    to |u_k/u0| (never below T_min): long for the initial kick across the
    fold, short while walking the unstable branch.
    """

    control: str
    u0: float
    T: float
    gain: float = 1.3
    chord_fraction: float = 0.5
    c: float | None = None
    tol1: float | None = None
    tol2: float | None = None
    tol3: float | None = None
    T_r: float | None = None
    T_s: float | None = None
    T_min: float | None = None
    max_outer: int = 100
    max_inner: int = 60
    noise_factor: float = 3.0
    noise_batches: int = 8
    ens: EnsembleSpec = field(default_factory=EnsembleSpec)

    def __post_init__(self):
        if self.gain <= 1.0:
            raise ValueError("gain must be greater than one")
        if not (0.0 < self.chord_fraction < 1.0):
            raise ValueError("chord_fraction must lie in (0, 1)")
        if self.T <= 0:
            raise ValueError("T must be positive")
        for name in ("c", "tol1", "tol2", "tol3", "T_r", "T_s", "T_min"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be >= 1")

    def resolved(self, sigma_h: float = 0.0) -> "ProtocolConfig":
        """Fill every None field; sigma_h is the measured noise floor."""
        scale = abs(self.u0)
        if scale == 0.0:
            scale = 1.0
        tol1 = self.tol1 if self.tol1 is not None else max(0.005 * scale, self.noise_factor * sigma_h * 0.1)
        tol2 = self.tol2 if self.tol2 is not None else max(1e-6, self.noise_factor * sigma_h)
        return replace(
            self,
            c=self.c if self.c is not None else 0.5 * scale,
            tol1=tol1,
            tol2=tol2,
            tol3=self.tol3 if self.tol3 is not None else 0.01 * scale,
            T_r=self.T_r if self.T_r is not None else self.T,
            T_s=self.T_s if self.T_s is not None else self.T,
            T_min=self.T_min if self.T_min is not None else self.T,
        )


@dataclass
class ChordBracket:
    """Search interval for the control action, shrunk by drift signs."""

    lB: float
    uB: float
    q: int = 0
    lB0: float = 0.0
    uB0: float = 0.0
    lo_moved: bool = False
    hi_moved: bool = False
    expansions: int = 0
    clamped: bool = False

    def __post_init__(self):
        if self.lB > self.uB:
            raise ValueError(f"bracket bounds out of order: [{self.lB}, {self.uB}]")
        self.lB0 = self.lB
        self.uB0 = self.uB

    @property
    def width(self) -> float:
        return self.uB - self.lB

    @property
    def is_degenerate(self) -> bool:
        return self.width == 0.0


def chord_point(bracket: ChordBracket, chord_fraction: float) -> float:
    """Next action proposal lB + a (uB - lB); the degenerate bracket
    returns its (single) endpoint."""
    if not (0.0 < chord_fraction < 1.0):
        raise ValueError("chord_fraction must lie in (0, 1)")
    if bracket.is_degenerate:
        return bracket.lB
    return bracket.lB + chord_fraction * (bracket.uB - bracket.lB)


def _shift_params(sim: Simulator, params, name: str, value: float):
    new = replace(params, **{name: value})
    sim.validate_params(new)
    return new


def _control_value(params, name: str) -> float:
    if not hasattr(params, name):
        raise ValueError(f"parameter set has no field {name!r}")
    return float(getattr(params, name))


class _Members:
    """The microscopic snapshot: one state and one RNG stream per
    realization, threaded through the whole protocol without re-lifting."""

    def __init__(self, sim: Simulator, x: CoarseState, params, ens: EnsembleSpec):
        self.sim = sim
        self.seeds = [ens.member_seed(i) for i in range(ens.n_realizations)]
        self.rngs = [sim.make_rng(s) for s in self.seeds]
        self.states = [sim.lift(x, params, rng) for rng in self.rngs]

    def evolve(self, params, horizon: float) -> None:
        for i, (state, rng) in enumerate(zip(self.states, self.rngs)):
            out = self.sim.evolve(state, params, horizon, rng)
            vals = self.sim.restrict(out).values
            if not np.all(np.isfinite(vals)):
                raise SimulationError(
                    f"non-finite observable from realization {i} (seed {self.seeds[i]})"
                )
            self.states[i] = out

    def lookahead(self, params, horizon: float) -> list[Any]:
        return [
            self.sim.evolve(state, params, horizon, rng)
            for state, rng in zip(self.states, self.rngs)
        ]

    def restrict_each(self, states=None) -> np.ndarray:
        states = self.states if states is None else states
        return np.stack([self.sim.restrict(s).values for s in states], axis=0)

    def mean_state(self) -> CoarseState:
        return ensemble_restrict(self.sim, self.states)


def evaluate_action(
    sim: Simulator,
    members: _Members,
    u: float,
    params,
    cfg: ProtocolConfig,
) -> tuple[float, float, CoarseState]:
    """Relax the snapshot for T_r at control + u, then watch the coarse
    state for T_s and report the drift.

    Returns (h, sigma_h, x0): h is the drift indicator between the
    ensemble-mean coarse state after relaxation and after the monitoring
    run; sigma_h its standard error across realizations (0 when there is
    only one). The relaxed snapshot replaces the previous one; the
    monitoring run is a lookahead and is discarded.
    """
    p_star = _control_value(params, cfg.control)
    shifted = _shift_params(sim, params, cfg.control, p_star + u)
    members.evolve(shifted, cfg.T_r)
    before = members.restrict_each()
    after = members.restrict_each(members.lookahead(shifted, cfg.T_s))
    x0 = sim.coarse_state(before.mean(axis=0))
    x_ts = sim.coarse_state(after.mean(axis=0))
    h = drift_indicator(x0, x_ts)
    n = before.shape[0]
    if n > 1:
        comp = int(np.argmax(np.abs(x_ts.values - x0.values)))
        per_member = after[:, comp] - before[:, comp]
        sigma = float(np.std(per_member, ddof=1) / math.sqrt(n))
    else:
        sigma = 0.0
    return h, sigma, x0


@dataclass
class InnerResult:
    u_hat: float
    converged: bool
    bracket: ChordBracket
    h_history: list[float]
    evaluations: list[dict]


def inner_chord_search(
    sim: Simulator,
    members: _Members,
    u_prev: float,
    params,
    cfg: ProtocolConfig,
    outer_k: int = 0,
    domain: tuple[float, float] = (-math.inf, math.inf),
) -> InnerResult:
    """Shrink the action bracket until the snapshot shows no resolvable
    drift.

    Sign convention: h < 0 means the sought equilibrium lies above the
    probed parameter (raise the lower bound); h > 0 means below (lower the
    upper bound). A bracket that collapses onto a bound that never moved is
    widened by c on that side (clamped to the admissible parameter domain);
    a bracket that collapses with both bounds moved has reached its
    resolution, and the probe with the smallest |h| is accepted.
    """
    if u_prev > 0:
        bracket = ChordBracket(0.0, u_prev)
    else:
        bracket = ChordBracket(u_prev, 0.0)
    p_star = _control_value(params, cfg.control)
    h_history: list[float] = []
    evaluations: list[dict] = []
    best_u, best_h = None, math.inf
    u_hat = None
    while bracket.q < cfg.max_inner:
        bracket.q += 1
        u = chord_point(bracket, cfg.chord_fraction)
        t0 = time.perf_counter()
        h, sigma, _x0 = evaluate_action(sim, members, u, params, cfg)
        wall = time.perf_counter() - t0
        h_history.append(h)
        evaluations.append(
            {
                "k": outer_k,
                "q": bracket.q,
                "lB": bracket.lB,
                "uB": bracket.uB,
                "u": u,
                "h": h,
                "sigma_h": sigma,
                "wall_s": wall,
            }
        )
        if abs(h) < best_h:
            best_u, best_h = u, abs(h)
        if abs(h) <= cfg.tol2:
            u_hat = u
            break
        if h < 0:
            bracket.lB = u
            bracket.lo_moved = True
        else:
            bracket.uB = u
            bracket.hi_moved = True
        if bracket.width < cfg.tol3:
            if not bracket.hi_moved:
                new_hi = min(bracket.uB0 + cfg.c, domain[1] - p_star)
                if new_hi <= bracket.uB0:
                    bracket.clamped = True
                    u_hat = best_u
                    break
                bracket.clamped = bracket.clamped or (new_hi < bracket.uB0 + cfg.c)
                bracket.uB0 = new_hi
                bracket.uB = new_hi
                bracket.hi_moved = False
                bracket.expansions += 1
            elif not bracket.lo_moved:
                new_lo = max(bracket.lB0 - cfg.c, domain[0] - p_star)
                if new_lo >= bracket.lB0:
                    bracket.clamped = True
                    u_hat = best_u
                    break
                bracket.clamped = bracket.clamped or (new_lo > bracket.lB0 - cfg.c)
                bracket.lB0 = new_lo
                bracket.lB = new_lo
                bracket.lo_moved = False
                bracket.expansions += 1
            else:
                # both bounds have moved: the root cannot be pinned more
                # finely than the bracket resolution
                u_hat = best_u
                break
    if u_hat is None:
        return InnerResult(best_u if best_u is not None else 0.0, False, bracket, h_history, evaluations)
    return InnerResult(u_hat, True, bracket, h_history, evaluations)


@dataclass
class SaddleResult:
    """Outcome of a saddle search; immutable once returned."""

    x_saddle: CoarseState
    p_star: float
    control: str
    u_trace: list[float]
    x_trace: list[CoarseState]
    converged: bool
    outer_iterations: int
    failure: str | None = None
    final_h: float | None = None
    final_sigma_h: float | None = None
    sigma_h0: float = 0.0
    inner_log: list[dict] = field(default_factory=list)
    config: ProtocolConfig | None = None


def saddle_protocol(
    sim: Simulator,
    params,
    start: CoarseState,
    cfg: ProtocolConfig,
    log: Callable[[dict], None] | None = None,
) -> SaddleResult:
    """Run the full outer/inner iteration from a (near-)stable coarse
    state toward the saddle at the nominal control value.

    The sign of cfg.u0 must point across the nearby fold (positive when the
    nominal value lies below the critical one). Divergence of the action
    sequence over three consecutive outer iterations aborts the run, as
    does an inner search that exhausts its iteration cap.
    """
    sim.validate_params(params)
    p_star = _control_value(params, cfg.control)
    domain = sim.param_bounds(cfg.control)
    if not (domain[0] < p_star < domain[1]):
        raise ValueError(f"nominal {cfg.control}={p_star} outside admissible domain {domain}")

    sigma_h0 = 0.0
    need_floor = cfg.tol2 is None and sim.is_stochastic
    if need_floor:
        probe_cfg = cfg.resolved(0.0)
        sigma_h0 = estimate_noise_floor(
            sim, start, params, probe_cfg.T_s, cfg.ens, n_batches=cfg.noise_batches
        )
    rcfg = cfg.resolved(sigma_h0)
    if not (domain[0] < p_star + rcfg.u0 < domain[1]):
        raise ValueError(
            f"initial action puts {cfg.control}={p_star + rcfg.u0} outside admissible domain"
        )

    members = _Members(sim, start, params, rcfg.ens)
    x_trace = [members.mean_state()]
    u_trace = [rcfg.u0]
    inner_log: list[dict] = []

    def finish(converged: bool, outer: int, failure: str | None) -> SaddleResult:
        x_final = members.mean_state()
        res = SaddleResult(
            x_saddle=x_final,
            p_star=p_star,
            control=rcfg.control,
            u_trace=u_trace,
            x_trace=x_trace,
            converged=converged,
            outer_iterations=outer,
            failure=failure,
            sigma_h0=sigma_h0,
            inner_log=inner_log,
            config=rcfg,
        )
        if converged:
            h, sig, _ = evaluate_action(sim, members, 0.0, params, rcfg)
            res.final_h = h
            res.final_sigma_h = sig
        return res

    u_prev = rcfg.u0
    grow_streak = 0
    prev_mag = abs(u_prev)
    for k in range(1, rcfg.max_outer + 1):
        if abs(u_prev) < rcfg.tol1:
            return finish(True, k - 1, None)
        # A: perturb at the current action; horizon shrinks with the action
        horizon = max(rcfg.T_min, rcfg.T * abs(u_prev) / abs(rcfg.u0)) if rcfg.u0 != 0 else rcfg.T
        members.evolve(_shift_params(sim, params, rcfg.control, p_star + u_prev), horizon)
        # B + C: bracket [0, u_prev] (by sign) and chord-search it
        inner = inner_chord_search(sim, members, u_prev, params, rcfg, outer_k=k, domain=domain)
        inner_log.extend(inner.evaluations)
        if log is not None:
            for rec in inner.evaluations:
                log(rec)
        if not inner.converged:
            return finish(False, k, "inner_search_exhausted")
        # D: relax at the accepted action
        members.evolve(_shift_params(sim, params, rcfg.control, p_star + inner.u_hat), rcfg.T_r)
        x_trace.append(members.mean_state())
        # E: gain pushes the next perturbation across the shifted saddle
        u_prev = rcfg.gain * inner.u_hat
        u_trace.append(u_prev)
        if abs(u_prev) > prev_mag:
            grow_streak += 1
            if grow_streak >= 3:
                return finish(False, k, "diverging_actions")
        else:
            grow_streak = 0
        prev_mag = abs(u_prev)
    return finish(False, rcfg.max_outer, "max_outer_exceeded")


def estimate_critical_parameter(
    sim: Simulator,
    params,
    control: str,
    grid: Sequence[float],
    start: CoarseState,
    settle_T: float,
    ens: EnsembleSpec,
    jump_threshold: float = 0.2,
    n_threads: int = 1,
) -> tuple[float, float] | None:
    """Coarse pre-scan for the fold: sweep the control over a grid,
    settling at each value from the previous settled state, and report the
    grid cell across which the attractor is lost (settled observable jumps
    by more than the threshold in infinity norm). Returns None when no jump
    occurs; use it to choose the sign and magnitude of u0."""
    from .coarse import coarse_timestep

    x = start
    prev = None
    for g in grid:
        shifted = _shift_params(sim, params, control, float(g))
        settled = coarse_timestep(sim, x, shifted, settle_T, ens, n_threads)
        if prev is not None and np.max(np.abs(settled.values - x.values)) > jump_threshold:
            return (prev, float(g))
        prev = float(g)
        x = settled
    return None
