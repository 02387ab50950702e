"""Coarse timestepper machinery: the simulator contract (lift / evolve /
restrict), seeded ensemble averaging, and the scalar drift indicator used
by the saddle-search protocol.
"""

from __future__ import annotations

import abc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from ._rng import mix_seed

__all__ = [
    "CoarseState",
    "EnsembleSpec",
    "Simulator",
    "SimulationError",
    "coarse_timestep",
    "drift_indicator",
    "estimate_noise_floor",
]


class SimulationError(RuntimeError):
    """A realization produced an invalid state; message names the
    realization index and seed."""


@dataclass(frozen=True)
class CoarseState:
    """Low-dimensional observable vector with named components.

    Values are stored as a read-only float array; every component must be
    finite.
    """

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float).copy()
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("coarse state must be a 1-D vector of length >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"coarse state contains non-finite values: {arr}")
        labels = tuple(self.labels)
        if len(labels) != arr.size:
            raise ValueError(f"{len(labels)} labels for {arr.size} observables")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.values.size

    def __getitem__(self, i: int) -> float:
        return float(self.values[i])

    def replace_values(self, values) -> "CoarseState":
        return CoarseState(values, self.labels)


@dataclass(frozen=True)
class EnsembleSpec:
    """How many independent realizations to run and how to seed them.

    Realization i uses seed mix_seed(base_seed, i); aggregation is always
    performed in index order so results are bit-reproducible.
    """

    n_realizations: int = 1
    base_seed: int = 0

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ValueError("n_realizations must be >= 1")

    def member_seed(self, index: int) -> int:
        return mix_seed(self.base_seed, index)


class Simulator(abc.ABC):
    """Contract every microscopic simulator exposes to the toolkit.

    Implementations own an opaque microscopic state type; the toolkit only
    moves those states through lift -> evolve -> restrict and never looks
    inside.
    """

    #: observable names, fixed per simulator
    labels: tuple[str, ...] = ()
    #: whether evolve depends on the rng argument
    is_stochastic: bool = True
    #: worst-case infinity-norm error of restrict(lift(x)) - x
    quantization_error: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.labels)

    def coarse_state(self, values) -> CoarseState:
        return CoarseState(values, self.labels)

    @abc.abstractmethod
    def make_rng(self, seed: int) -> Any:
        """Create this simulator's RNG from a 64-bit seed."""

    @abc.abstractmethod
    def lift(self, x: CoarseState, params, rng) -> Any:
        """Build a microscopic state consistent with observables x."""

    @abc.abstractmethod
    def evolve(self, micro, params, horizon: float, rng) -> Any:
        """Advance a microscopic state; horizon 0 returns an identical copy.
        Must not mutate the input state."""

    @abc.abstractmethod
    def restrict(self, micro) -> CoarseState:
        """Project a microscopic state down to the observables."""

    @abc.abstractmethod
    def validate_params(self, params) -> None:
        """Raise ValueError when a parameter set is outside the admissible
        domain."""

    def param_bounds(self, name: str) -> tuple[float, float]:
        """Admissible open interval for one scalar parameter."""
        return (-np.inf, np.inf)


def drift_indicator(x0: CoarseState, xT: CoarseState) -> float:
    """Signed change of the observable that moved the most.

    The component i maximizing |xT_i - x0_i| is selected (ties favor the
    smallest index) and xT_i - x0_i is returned; zero at fixed points.
    """
    if x0.dim != xT.dim:
        raise ValueError(f"dimension mismatch: {x0.dim} vs {xT.dim}")
    diff = xT.values - x0.values
    return float(diff[int(np.argmax(np.abs(diff)))])


def _check_ensemble(sim: Simulator, ens: EnsembleSpec) -> None:
    if not sim.is_stochastic and ens.n_realizations != 1:
        raise ValueError("deterministic simulators require n_realizations = 1")


def _map_members(fn: Callable[[int], np.ndarray], n: int, n_threads: int) -> list:
    if n_threads <= 1 or n == 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=min(n_threads, n)) as pool:
        return list(pool.map(fn, range(n)))


def _mean_state(sim: Simulator, values: Sequence[np.ndarray]) -> CoarseState:
    # index-order stacking keeps the mean bit-reproducible
    return sim.coarse_state(np.mean(np.stack(values, axis=0), axis=0))


def ensemble_restrict(sim: Simulator, members: Sequence[Any]) -> CoarseState:
    """Mean coarse state of a list of microscopic states."""
    return _mean_state(sim, [sim.restrict(m).values for m in members])


def coarse_timestep(
    sim: Simulator,
    x: CoarseState,
    params,
    horizon: float,
    ens: EnsembleSpec,
    n_threads: int = 1,
) -> CoarseState:
    """One application of the coarse timestepper: lift x to `ens.n_realizations`
    microscopic states, evolve each for `horizon`, restrict, and average in
    index order.
    """
    state, _ = coarse_timestep_detail(sim, x, params, horizon, ens, n_threads)
    return state


def coarse_timestep_detail(
    sim: Simulator,
    x: CoarseState,
    params,
    horizon: float,
    ens: EnsembleSpec,
    n_threads: int = 1,
) -> tuple[CoarseState, np.ndarray]:
    """coarse_timestep plus the per-observable standard error of the mean
    (zeros for a single realization)."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if x.dim != sim.dim:
        raise ValueError(f"state dimension {x.dim} != simulator dimension {sim.dim}")
    _check_ensemble(sim, ens)
    sim.validate_params(params)

    def run(i: int) -> np.ndarray:
        seed = ens.member_seed(i)
        rng = sim.make_rng(seed)
        micro = sim.evolve(sim.lift(x, params, rng), params, horizon, rng)
        out = sim.restrict(micro).values
        if not np.all(np.isfinite(out)):
            raise SimulationError(
                f"non-finite observable from realization {i} (seed {seed}): {out}"
            )
        return out

    values = _map_members(run, ens.n_realizations, n_threads)
    mean = _mean_state(sim, values)
    if ens.n_realizations > 1:
        stderr = np.std(np.stack(values, axis=0), axis=0, ddof=1) / np.sqrt(ens.n_realizations)
    else:
        stderr = np.zeros(sim.dim)
    return mean, stderr


def estimate_noise_floor(
    sim: Simulator,
    x: CoarseState,
    params,
    horizon: float,
    ens: EnsembleSpec,
    n_batches: int = 8,
    n_threads: int = 1,
) -> float:
    """Standard deviation of the ensemble-mean drift indicator, estimated
    from independent seed batches started at the same x.

    This is the noise floor sigma_h of a single protocol evaluation; drift
    tolerances should sit a few multiples above it. Deterministic
    simulators return exactly 0.
    """
    if not sim.is_stochastic:
        return 0.0
    if ens.n_realizations < 2:
        raise ValueError("noise floor estimation needs n_realizations >= 2")
    if n_batches < 2:
        raise ValueError("need at least 2 batches")
    hs = []
    for b in range(n_batches):
        batch = EnsembleSpec(ens.n_realizations, mix_seed(ens.base_seed, (b + 1) << 20))
        xT = coarse_timestep(sim, x, params, horizon, batch, n_threads)
        hs.append(drift_indicator(x, xT))
    return float(np.std(hs, ddof=1))
