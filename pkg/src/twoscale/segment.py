"""History windows on a uniform grid.

A Segment holds the last tau units of a path sampled every h units: values
has shape (M + 1, n) with M = tau / h, and row i is the state at offset
-tau + i * h.  Row M is "now" (offset 0), row 0 is the oldest point.  The
window is immutable; stepping forward produces a new Segment via
shift_append.

All delay bookkeeping in the package is done in index space on top of
these windows, so tau / h (and later delta / h) must be an exact integer
ratio.  exact_steps is the single place that ratio is checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError, UsageError

# Relative slack when deciding whether a float ratio is an integer.
_DIV_RTOL = 1e-9
# Evaluation offsets may overshoot the window ends by this fraction of h
# (accumulated float error from t - tau style arithmetic); anything worse
# is a caller bug.
_EVAL_SLACK = 1e-6


def exact_steps(span: float, h: float, what: str = "span") -> int:
    """Return span / h as an int, requiring the division to be exact.

    Exact means within _DIV_RTOL relative error; the snapped integer is
    returned so downstream code never touches the float ratio again.
    """
    if h <= 0.0:
        raise DomainError(f"step h={h} must be positive")
    if span <= 0.0:
        raise DomainError(f"{what}={span} must be positive")
    ratio = span / h
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > _DIV_RTOL * max(1.0, ratio):
        raise DomainError(
            f"{what}={span!r} is not an integer multiple of h={h!r} (ratio {ratio!r})"
        )
    return steps


@dataclass(frozen=True, eq=False)
class Segment:
    """Immutable sampled history over [-tau, 0]."""

    tau: float
    h: float
    values: np.ndarray

    def __post_init__(self):
        steps = exact_steps(self.tau, self.h, "tau")
        arr = np.array(self.values, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise DataError(f"segment values must be 1-d or 2-d, got shape {arr.shape}")
        if arr.shape[0] != steps + 1:
            raise DataError(
                f"segment needs {steps + 1} rows for tau={self.tau}, h={self.h}; "
                f"got {arr.shape[0]}"
            )
        if not np.isfinite(arr).all():
            raise DataError("segment values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def _wrap(cls, tau: float, h: float, values: np.ndarray) -> "Segment":
        # Trusted constructor for hot loops: no copy, no validation.
        seg = object.__new__(cls)
        object.__setattr__(seg, "tau", tau)
        object.__setattr__(seg, "h", h)
        object.__setattr__(seg, "values", values)
        return seg

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def grid_steps(self) -> int:
        return self.values.shape[0] - 1

    def at(self, theta: float) -> np.ndarray:
        return value_at(self, theta)


def _node_norms(arr: np.ndarray) -> np.ndarray:
    # Euclidean length of each row; exact |.| in the scalar case so that
    # sup_norm of a 1-d segment is free of sqrt(x*x) rounding.
    if arr.shape[1] == 1:
        return np.abs(arr[:, 0])
    return np.sqrt(np.einsum("ij,ij->i", arr, arr))


def sup_norm(seg: Segment) -> float:
    """Largest Euclidean node norm over the window."""
    return float(_node_norms(seg.values).max())


def value_at(seg: Segment, theta: float) -> np.ndarray:
    """State at offset theta in [-tau, 0], linearly interpolated.

    Offsets that land on a grid node (within float slack) return that row
    exactly.  Offsets overshooting either end by at most _EVAL_SLACK * h
    are clamped; anything further out raises DomainError.
    """
    m = seg.grid_steps
    pos = (theta + seg.tau) / seg.h
    if pos < 0.0 or pos > m:
        if pos >= -_EVAL_SLACK and pos <= m + _EVAL_SLACK:
            pos = min(max(pos, 0.0), float(m))
        else:
            raise DomainError(
                f"offset theta={theta} outside [-tau, 0] for tau={seg.tau}"
            )
    nearest = int(round(pos))
    if abs(pos - nearest) <= _DIV_RTOL * max(1.0, pos):
        return seg.values[nearest].copy()
    lo = int(np.floor(pos))
    frac = pos - lo
    return (1.0 - frac) * seg.values[lo] + frac * seg.values[lo + 1]


def shift_append(seg: Segment, new_value) -> Segment:
    """Advance the window one step: drop the oldest node, append new_value."""
    row = np.asarray(new_value, dtype=float)
    if row.ndim == 0:
        row = row[None]
    if row.shape != (seg.n,):
        raise DataError(f"new value must have shape ({seg.n},), got {row.shape}")
    if not np.isfinite(row).all():
        raise DataError("new segment value must be finite")
    values = np.concatenate([seg.values[1:], row[None, :]])
    values.setflags(write=False)
    return Segment._wrap(seg.tau, seg.h, values)


def lipschitz_modulus(seg: Segment) -> float:
    """Largest per-step slope |v[i+1] - v[i]| / h over the window."""
    if seg.grid_steps == 0:
        return 0.0
    diffs = np.diff(seg.values, axis=0)
    return float(_node_norms(diffs).max() / seg.h)


def constant_segment(tau: float, h: float, value, n: int | None = None) -> Segment:
    """Window that sits at a single state for all offsets."""
    row = np.asarray(value, dtype=float)
    if row.ndim == 0:
        row = row[None]
    if row.ndim != 1:
        raise DataError(f"constant value must be scalar or 1-d, got shape {row.shape}")
    if n is not None and row.shape[0] != n:
        raise UsageError(f"constant value has dimension {row.shape[0]}, expected {n}")
    steps = exact_steps(tau, h, "tau")
    values = np.tile(row, (steps + 1, 1))
    return Segment(tau, h, values)


def segment_from_function(tau: float, h: float, f) -> Segment:
    """Sample f(theta) on the grid theta = -tau + i * h."""
    steps = exact_steps(tau, h, "tau")
    thetas = (np.arange(steps + 1) - steps) * h
    rows = []
    for th in thetas:
        row = np.asarray(f(float(th)), dtype=float)
        if row.ndim == 0:
            row = row[None]
        rows.append(row)
    return Segment(tau, h, np.stack(rows))


def segment_to_dict(seg: Segment) -> dict:
    return {
        "tau": seg.tau,
        "h": seg.h,
        "n": seg.n,
        "values": seg.values.tolist(),
    }


def segment_from_dict(data: dict) -> Segment:
    try:
        tau = float(data["tau"])
        h = float(data["h"])
        values = np.asarray(data["values"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed segment payload: {exc}") from exc
    seg = Segment(tau, h, values)
    declared = data.get("n")
    if declared is not None and int(declared) != seg.n:
        raise DataError(f"segment payload declares n={declared} but values have n={seg.n}")
    return seg
