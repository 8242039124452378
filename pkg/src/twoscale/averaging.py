"""Block-frozen auxiliary construction and the averaged slow equation.

The averaging argument runs through an auxiliary pair: partition [0, T]
into blocks of length delta, freeze the slow window at its value at each
block start t_delta, and restart the auxiliary fast process from the
true fast state at every block boundary.  The block length follows the
schedule delta = eps * sqrt(-ln eps) (valid for eps < 1/e, where
eps/delta < 1), snapped to tau / N so block boundaries land on delay
multiples and on the grid.

The averaged equation replaces the fast dependence of the slow drift by
the stationary average bbar1; simulate_averaged integrates it with the
same W1 stream as the coupled system it is compared against, which is
what makes pathwise sup-distance comparisons meaningful.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError, UsageError
from .frozen import DriftEstimatorBudget, estimate_averaged_drift
from .noise import NoiseStream, StreamFactory, fast_increments, gaussian_increments
from .segment import Segment, exact_steps
from .solver import (
    DEFAULT_KAPPA_STAB,
    DIVERGENCE_CAP,
    TimeGrid,
    fast_lag_steps,
    TrajectoryBundle,
    _blowup,
    _check_segment,
    _check_streams,
    _coupled_core,
    make_grid,
    simulate_sdde,
)
from .systems import SystemSpec

_INV_E = math.exp(-1.0)


@dataclass(frozen=True)
class DeltaSchedule:
    """Block length for one epsilon: raw value and its tau/N snap."""

    epsilon: float
    delta_raw: float
    delta: float
    N_delta: int


def khasminskii_delta(epsilon: float, tau: float) -> DeltaSchedule:
    """Block schedule delta_raw = eps * sqrt(-ln eps), snapped to tau / N.

    Requires 0 < eps < 1/e so that eps / delta_raw = (-ln eps)^{-1/2}
    stays below 1.  N = ceil(tau / delta_raw), hence delta <= delta_raw
    and delta divides tau exactly.
    """
    if epsilon <= 0.0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if epsilon >= _INV_E:
        raise DomainError(
            f"epsilon={epsilon} >= 1/e; the schedule needs eps/delta < 1, "
            "i.e. -ln(eps) > 1"
        )
    if tau <= 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    delta_raw = epsilon * math.sqrt(-math.log(epsilon))
    n = max(1, math.ceil(tau / delta_raw))
    return DeltaSchedule(
        epsilon=float(epsilon),
        delta_raw=delta_raw,
        delta=tau / n,
        N_delta=n,
    )


def breakpoint(t: float, delta: float) -> float:
    """Largest block boundary floor(t/delta)*delta not after t.

    Computed with a one-part-in-1e9 snap so that a t which IS a float
    block boundary maps to itself and the operation is exactly
    idempotent; mid-block times are unaffected.
    """
    if delta <= 0.0:
        raise DomainError(f"delta must be positive, got {delta}")
    if t < 0.0:
        raise DomainError(f"t must be >= 0, got {t}")
    q = t / delta
    k = math.floor(q + 1e-9 * max(1.0, q))
    return k * delta


@dataclass(frozen=True, eq=False)
class AuxiliaryPair:
    """Coupled pair plus its block-frozen auxiliary counterpart."""

    coupled: TrajectoryBundle
    auxiliary: TrajectoryBundle
    schedule: DeltaSchedule
    reset_indices: np.ndarray  # absolute array indices of block starts


def simulate_auxiliary(
    spec: SystemSpec,
    xi: Segment,
    eta: Segment,
    epsilon: float,
    schedule: DeltaSchedule,
    grid: TimeGrid,
    w1: NoiseStream,
    w2: NoiseStream,
    *,
    kappa_stab: float = DEFAULT_KAPPA_STAB,
) -> AuxiliaryPair:
    """Run the true pair and the block-frozen auxiliary pair on shared noise.

    The coupled (X, Y) recursion runs first on increments drawn from
    (w1, w2).  The auxiliary pair replays those exact increments; its
    slow process uses coefficients frozen at the true slow window at
    each block start, and its fast process restarts from the true fast
    state at every block boundary (bit-exact reset, audited by callers).
    """
    if not (0.0 < epsilon <= 1.0):
        raise DomainError(f"epsilon must lie in (0, 1], got {epsilon}")
    if grid.h > kappa_stab * epsilon * (1.0 + 1e-12):
        raise DomainError(
            f"step h={grid.h} violates the stability cap {kappa_stab}*epsilon"
        )
    delta_steps = exact_steps(min(schedule.delta, grid.T), grid.h, "delta")
    if exact_steps(spec.tau, grid.h, "tau") != grid.tau_steps:
        raise UsageError(f"grid was built for a different delay than spec.tau={spec.tau}")
    _check_segment(xi, grid, spec.n, "xi")
    _check_segment(eta, grid, spec.n, "eta")
    _check_streams(spec, w1, w2)

    dw1 = gaussian_increments(w1, grid.steps, grid.h)
    dwf = fast_increments(w2, grid.steps, grid.h, epsilon)
    x, y = _coupled_core(spec, xi, eta, epsilon, grid, dw1, dwf)

    n, m = spec.n, spec.m
    h = grid.h
    ts = grid.tau_steps
    tau = grid.tau
    h_over_eps = h / epsilon
    lag = fast_lag_steps(epsilon, grid)
    b1, sigma1, b2, sigma2 = spec.b1, spec.sigma1, spec.b2, spec.sigma2
    wrap = Segment._wrap

    xt = np.empty((grid.total, n))
    yt = np.empty((grid.total, n))
    xt[: ts + 1] = xi.values
    yt[: ts + 1] = eta.values

    frozen_seg = None
    s_frozen = None
    resets = []
    for k in range(grid.steps):
        i = ts + k
        if k % delta_steps == 0:
            # Block start: freeze the TRUE slow window, restart aux fast
            # from the TRUE fast state.
            frozen_seg = wrap(tau, h, x[k: i + 1])
            s_frozen = np.asarray(sigma1(frozen_seg), dtype=float)
            if s_frozen.shape != (n, m):
                raise DataError(f"sigma1 returned shape {s_frozen.shape}, expected ({n}, {m})")
            yt[i] = y[i]
            resets.append(i)
        ytseg = wrap(tau, h, yt[k: i + 1])
        yk = yt[i]
        ytau = yt[i - lag]

        bx = np.asarray(b1(frozen_seg, ytseg), dtype=float)
        if bx.shape != (n,):
            raise DataError(f"b1 returned shape {bx.shape}, expected ({n},)")
        by = np.asarray(b2(frozen_seg, yk, ytau), dtype=float)
        if by.shape != (n,):
            raise DataError(f"b2 returned shape {by.shape}, expected ({n},)")
        sy = np.asarray(sigma2(frozen_seg, yk, ytau), dtype=float)
        if sy.shape != (n, m):
            raise DataError(f"sigma2 returned shape {sy.shape}, expected ({n}, {m})")

        xt[i + 1] = xt[i] + bx * h + s_frozen @ dw1[k]
        yt[i + 1] = yk + by * h_over_eps + sy @ dwf[k]

        if not (np.abs(xt[i + 1]).max() <= DIVERGENCE_CAP):
            raise _blowup(k, h, (xt[i], yt[i]), "auxiliary slow component diverged")
        if not (np.abs(yt[i + 1]).max() <= DIVERGENCE_CAP):
            raise _blowup(k, h, (xt[i], yt[i]), "auxiliary fast component diverged")

    for arr in (x, y, xt, yt):
        arr.setflags(write=False)
    coupled = TrajectoryBundle(grid=grid, slow_path=x, fast_path=y,
                               epsilon=float(epsilon), labels=("X", "Y"))
    aux = TrajectoryBundle(grid=grid, slow_path=xt, fast_path=yt,
                           epsilon=float(epsilon), labels=("Xtilde", "Ytilde"))
    return AuxiliaryPair(coupled=coupled, auxiliary=aux, schedule=schedule,
                         reset_indices=np.asarray(resets, dtype=int))


def closed_form_drift(spec: SystemSpec):
    """Averaged drift callable from the benchmark's closed form."""
    if spec.benchmark is None:
        raise UsageError("spec has no benchmark closed form; use an estimator source")
    return spec.benchmark.averaged_drift


def simulate_averaged(
    spec: SystemSpec,
    xi: Segment,
    drift_source,
    grid: TimeGrid,
    w1: NoiseStream,
) -> TrajectoryBundle:
    """Integrate dXbar = bbar1(Xbar_t) dt + sigma1(Xbar_t) dW1.

    drift_source(seg) supplies bbar1: either a closed form or an
    EstimatedDriftSource.  Pass a stream with the same address as the
    coupled run's W1 to realize the shared-noise comparison.
    """
    if not callable(drift_source):
        raise UsageError("drift_source must be callable on a Segment")
    return simulate_sdde(spec.n, spec.m, drift_source, spec.sigma1, xi, grid, w1,
                         role="slow", label="Xbar")


class EstimatedDriftSource:
    """Averaged drift evaluated by on-demand frozen sub-simulation.

    Each distinct slow window triggers a fresh estimate_averaged_drift
    run whose streams are seeded from a digest of the window, so the
    evaluator is a pure function of (window, seed, budget).  Windows are
    memoized on a quantized digest (quant per coordinate) because exact
    continuous-state caching is impossible; the quantization bias is
    measurable against the benchmark closed form.
    """

    def __init__(
        self,
        spec: SystemSpec,
        budget: DriftEstimatorBudget,
        sub_h: float,
        seed: int,
        *,
        quant: float = 1e-4,
        eta: Segment | None = None,
    ):
        if quant <= 0.0:
            raise DomainError(f"quant must be positive, got {quant}")
        self.spec = spec
        self.budget = budget
        self.seed = int(seed)
        self.quant = float(quant)
        self.eta = eta
        self.sub_grid = make_grid(budget.burn_in + budget.horizon, sub_h, spec.tau)
        self.calls = 0
        self.cache_misses = 0
        self.max_std_error = 0.0
        self._cache: dict[bytes, np.ndarray] = {}

    def _key(self, seg: Segment) -> bytes:
        q = np.round(seg.values / self.quant).astype(np.int64)
        return q.tobytes()

    def __call__(self, seg: Segment) -> np.ndarray:
        self.calls += 1
        key = self._key(seg)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        self.cache_misses += 1
        digest = hashlib.blake2b(key + b"|" + str(self.seed).encode(), digest_size=8)
        sub_seed = int.from_bytes(digest.digest(), "big")
        est = estimate_averaged_drift(
            self.spec, seg, self.budget.burn_in, self.budget.horizon,
            self.budget.replicas, self.sub_grid, StreamFactory(sub_seed, self.spec.m),
            eta=self.eta,
        )
        se = float(np.max(est.std_error)) if est.std_error.size else 0.0
        if se > self.max_std_error:
            self.max_std_error = se
        value = est.value.copy()
        value.setflags(write=False)
        self._cache[key] = value
        return value
