"""Scenario configuration, experiment orchestration, and reporting.

A scenario JSON names a system, a grid, an experiment, and Monte Carlo
sizes; the run_* functions turn it into an ExperimentReport with one row
per reported statistic and a list of named pass/fail gates.  Reports
serialize to report.csv (fixed column schema, append-only versioned) and
report.json.

Determinism contract: a scenario's CSV body is a pure function of its
config.  Path tasks draw from streams addressed by (seed, path, tag),
workers return values in task order, and reductions run in fixed path
order, so serial and parallel execution produce byte-identical reports;
the sha256 of the CSV text is included as the reproducibility hash.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings as _warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .averaging import (
    DeltaSchedule,
    EstimatedDriftSource,
    closed_form_drift,
    khasminskii_delta,
    simulate_auxiliary,
    simulate_averaged,
)
from .errors import ConfigError, DegenerateFitError, TwoscaleError, UsageError
from .frozen import (
    DriftEstimatorBudget,
    estimate_averaged_drift,
    mixing_decay,
)
from .metrics import p_moment, segment_displacement_moment, slope_fit, sup_distance
from .noise import W1, W2, StreamFactory
from .segment import Segment, constant_segment, exact_steps, lipschitz_modulus, segment_from_dict
from .solver import make_grid, simulate_coupled
from .systems import (
    build_system,
    check_dissipativity,
    check_growth_and_lipschitz,
    check_initial_segment,
    random_point_sampler,
    random_segment_pair_sampler,
    spot_check_purity,
)

SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "schema_version", "experiment", "epsilon", "delta", "p",
    "paths", "value", "std_error", "extra_json",
)

EXPERIMENTS = (
    "converge", "auxiliary_gap", "segment_continuity",
    "frozen", "mixing", "check", "simulate",
)

_INV_E = math.exp(-1.0)

_ALLOWED_KEYS = {
    "experiment", "system", "tau", "T", "h", "h_factor", "kappa_stab",
    "epsilon", "epsilons", "p", "paths", "seed", "threads",
    "xi", "eta", "eta_prime", "burn_in", "horizon", "replicas",
    "mixing_replicas", "checkpoints", "drift_source", "estimator",
    "deltas", "sample_times", "lambda3_cap", "trials", "delta", "dump_paths",
}


def _divides(span: float, h: float) -> bool:
    ratio = span / h
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, abs(ratio))


def _cfg_number(cfg, key, default, *, positive=False, nonneg=False):
    raw = cfg.get(key, default)
    if raw is None:
        return None
    try:
        val = float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a number, got {raw!r}") from None
    if not math.isfinite(val):
        raise ConfigError(f"{key} must be finite, got {val}")
    if positive and val <= 0.0:
        raise ConfigError(f"{key} must be positive, got {val}")
    if nonneg and val < 0.0:
        raise ConfigError(f"{key} must be >= 0, got {val}")
    return val


def _cfg_int(cfg, key, default, *, minimum=None):
    raw = cfg.get(key, default)
    try:
        val = int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {raw!r}") from None
    if minimum is not None and val < minimum:
        raise ConfigError(f"{key} must be >= {minimum}, got {val}")
    return val


@dataclass(frozen=True, eq=False)
class Scenario:
    """Validated, normalized experiment configuration."""

    experiment: str
    system: dict
    tau: float
    T: float
    h: object  # "auto" or float
    h_factor: float
    kappa_stab: float
    epsilons: tuple
    p: float
    paths: int
    seed: int
    threads: int
    xi: dict
    eta: dict
    eta_prime: dict | None
    burn_in: float
    horizon: float
    replicas: int
    mixing_replicas: int
    checkpoints: int
    drift_source: str
    estimator: dict
    deltas: tuple | None
    sample_times: tuple | None
    lambda3_cap: float
    trials: int
    delta: object  # "auto" or float
    dump_paths: bool
    config: dict = field(repr=False)

    @classmethod
    def from_config(cls, raw: dict) -> "Scenario":
        if not isinstance(raw, dict):
            raise ConfigError(f"scenario config must be an object, got {type(raw).__name__}")
        unknown = set(raw) - _ALLOWED_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        experiment = raw.get("experiment")
        if experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment must be one of {EXPERIMENTS}, got {experiment!r}"
            )
        system = raw.get("system")
        if not isinstance(system, dict):
            raise ConfigError("config needs a system object")

        tau = _cfg_number(raw, "tau", 1.0, positive=True)
        T = _cfg_number(raw, "T", 1.0, positive=True)

        h = raw.get("h", "auto")
        if h != "auto":
            h = _cfg_number(raw, "h", None, positive=True)
        kappa_stab = _cfg_number(raw, "kappa_stab", 0.1, positive=True)
        h_factor = _cfg_number(raw, "h_factor", 0.05, positive=True)
        if h_factor > kappa_stab:
            raise ConfigError(
                f"h_factor={h_factor} exceeds kappa_stab={kappa_stab}; "
                "auto-resolved steps would violate the stability cap"
            )

        eps_raw = raw.get("epsilons")
        if eps_raw is None and "epsilon" in raw:
            eps_raw = [raw["epsilon"]]
        if eps_raw is None:
            eps_raw = []
        if not isinstance(eps_raw, (list, tuple)):
            raise ConfigError(f"epsilons must be a list, got {eps_raw!r}")
        epsilons = []
        for e in eps_raw:
            try:
                val = float(e)
            except (TypeError, ValueError):
                raise ConfigError(f"epsilon entries must be numbers, got {e!r}") from None
            if not (0.0 < val <= 1.0):
                raise ConfigError(f"epsilon must lie in (0, 1], got {val}")
            epsilons.append(val)
        if len(set(epsilons)) != len(epsilons):
            raise ConfigError(f"duplicate epsilon values: {epsilons}")

        delta = raw.get("delta", "auto")
        if delta != "auto":
            delta = _cfg_number(raw, "delta", None, positive=True)
        if experiment == "auxiliary_gap" and delta == "auto":
            bad = [e for e in epsilons if e >= _INV_E]
            if bad:
                raise ConfigError(
                    f"epsilons {bad} are >= 1/e; the block schedule needs eps < 1/e"
                )

        p = _cfg_number(raw, "p", 2.0, positive=True)
        paths = _cfg_int(raw, "paths", 64, minimum=1)
        seed = _cfg_int(raw, "seed", 12345)
        threads = _cfg_int(raw, "threads", 1, minimum=1)

        def seg_cfg(key, default):
            val = raw.get(key, default)
            if val is None:
                return None
            if not isinstance(val, dict) or not ({"constant", "values"} & set(val)):
                raise ConfigError(
                    f"{key} must be an object with 'constant' or 'values', got {val!r}"
                )
            return val

        xi = seg_cfg("xi", {"constant": 1.0})
        eta = seg_cfg("eta", {"constant": 0.0})
        eta_prime = seg_cfg("eta_prime", None)

        burn_in = _cfg_number(raw, "burn_in", 10.0 * tau, nonneg=True)
        horizon = _cfg_number(raw, "horizon", 50.0 * tau, positive=True)
        replicas = _cfg_int(raw, "replicas", 16, minimum=1)
        mixing_replicas = _cfg_int(raw, "mixing_replicas", 8, minimum=8)
        checkpoints = _cfg_int(raw, "checkpoints", 8, minimum=3)

        drift_source = raw.get("drift_source", "closed_form")
        if drift_source not in ("closed_form", "estimator"):
            raise ConfigError(
                f"drift_source must be 'closed_form' or 'estimator', got {drift_source!r}"
            )
        est_raw = raw.get("estimator", {})
        if not isinstance(est_raw, dict):
            raise ConfigError("estimator must be an object")
        est_unknown = set(est_raw) - {"burn_in", "horizon", "replicas", "h", "quant"}
        if est_unknown:
            raise ConfigError(f"unknown estimator keys: {sorted(est_unknown)}")
        estimator = {
            "burn_in": _cfg_number(est_raw, "burn_in", 5.0 * tau, nonneg=True),
            "horizon": _cfg_number(est_raw, "horizon", 20.0 * tau, positive=True),
            "replicas": _cfg_int(est_raw, "replicas", 4, minimum=1),
            "h": _cfg_number(est_raw, "h", tau / 100.0, positive=True),
            "quant": _cfg_number(est_raw, "quant", 1e-4, positive=True),
        }

        deltas_raw = raw.get("deltas")
        deltas = None
        if deltas_raw is not None:
            if not isinstance(deltas_raw, (list, tuple)) or len(deltas_raw) < 1:
                raise ConfigError("deltas must be a non-empty list")
            deltas = sorted((float(d) for d in deltas_raw), reverse=True)
            if any(d <= 0.0 for d in deltas):
                raise ConfigError(f"deltas must be positive, got {deltas}")

        st_raw = raw.get("sample_times")
        sample_times = None
        if st_raw is not None:
            if not isinstance(st_raw, (list, tuple)) or len(st_raw) < 1:
                raise ConfigError("sample_times must be a non-empty list")
            sample_times = [float(t) for t in st_raw]
            if any(not (0.0 < t <= T) for t in sample_times):
                raise ConfigError(f"sample_times must lie in (0, T], got {sample_times}")

        lambda3_cap = _cfg_number(raw, "lambda3_cap", 10.0, nonneg=True)
        trials = _cfg_int(raw, "trials", 2000, minimum=1)
        dump_paths = bool(raw.get("dump_paths", False))

        config = {
            "experiment": experiment,
            "system": system,
            "tau": tau,
            "T": T,
            "h": h,
            "h_factor": h_factor,
            "kappa_stab": kappa_stab,
            "epsilons": list(epsilons),
            "p": p,
            "paths": paths,
            "seed": seed,
            "threads": threads,
            "xi": xi,
            "eta": eta,
            "eta_prime": eta_prime,
            "burn_in": burn_in,
            "horizon": horizon,
            "replicas": replicas,
            "mixing_replicas": mixing_replicas,
            "checkpoints": checkpoints,
            "drift_source": drift_source,
            "estimator": estimator,
            "deltas": list(deltas) if deltas is not None else None,
            "sample_times": list(sample_times) if sample_times is not None else None,
            "lambda3_cap": lambda3_cap,
            "trials": trials,
            "delta": delta,
            "dump_paths": dump_paths,
        }
        return cls(
            experiment=experiment, system=system, tau=tau, T=T, h=h,
            h_factor=h_factor, kappa_stab=kappa_stab, epsilons=tuple(epsilons),
            p=p, paths=paths, seed=seed, threads=threads,
            xi=xi, eta=eta, eta_prime=eta_prime,
            burn_in=burn_in, horizon=horizon, replicas=replicas,
            mixing_replicas=mixing_replicas, checkpoints=checkpoints,
            drift_source=drift_source, estimator=estimator,
            deltas=tuple(deltas) if deltas is not None else None,
            sample_times=tuple(sample_times) if sample_times is not None else None,
            lambda3_cap=lambda3_cap, trials=trials, delta=delta,
            dump_paths=dump_paths, config=config,
        )

    def digest(self) -> str:
        # Worker count and dump flags change execution, not results.
        core = {k: v for k, v in self.config.items()
                if k not in ("threads", "dump_paths")}
        canonical = json.dumps(core, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def build_spec(self):
        sys_cfg = dict(self.system)
        declared = sys_cfg.get("tau")
        if declared is not None and abs(float(declared) - self.tau) > 1e-12 * self.tau:
            raise ConfigError(
                f"system tau={declared} conflicts with scenario tau={self.tau}"
            )
        sys_cfg["tau"] = self.tau
        spec = build_system(sys_cfg)
        if abs(spec.tau - self.tau) > 1e-12 * self.tau:
            raise ConfigError(
                f"registered system has tau={spec.tau}, scenario declares {self.tau}"
            )
        return spec

    def materialize_segment(self, role: str, h: float, n: int) -> Segment | None:
        cfg = getattr(self, role)
        if cfg is None:
            return None
        if "constant" in cfg:
            value = cfg["constant"]
            if isinstance(value, (int, float)):
                value = np.full(n, float(value))
            return constant_segment(self.tau, h, value, n=n)
        seg = segment_from_dict({"tau": self.tau, "h": h, **cfg})
        if seg.n != n:
            raise ConfigError(f"{role} has dimension {seg.n}, system needs {n}")
        return seg

    def resolve_h(self, epsilon: float | None = None, anchor: float | None = None,
                  default_target: float | None = None) -> float:
        """Pick the grid step for one run.

        Fixed h is validated (divides tau and the block anchor, honors the
        stability cap).  Auto h targets h_factor * epsilon (or the given
        default) and is snapped DOWN to divide the anchor (the block
        length when there is one, else tau).
        """
        if self.h != "auto":
            h = float(self.h)
            try:
                exact_steps(self.tau, h, "tau")
                exact_steps(self.T, h, "T")
                if anchor is not None:
                    exact_steps(anchor, h, "delta")
            except TwoscaleError as exc:
                raise ConfigError(f"fixed h={h} misaligned: {exc}") from exc
            if epsilon is not None and h > self.kappa_stab * epsilon * (1.0 + 1e-12):
                raise ConfigError(
                    f"fixed h={h} violates the stability cap for epsilon={epsilon}"
                )
            return h
        if epsilon is not None:
            target = self.h_factor * epsilon
            if default_target is not None:
                target = min(target, default_target)
        elif default_target is not None:
            target = default_target
        else:
            raise ConfigError("auto h needs an epsilon or a default target")
        base = anchor if anchor is not None else self.tau
        k0 = max(1, math.ceil(base / target - 1e-12))
        # The step must tile the anchor, the delay, and the horizon; walk
        # the divisor up until all three land on the same grid.
        for k in range(k0, k0 + 4096):
            h = base / k
            if _divides(self.tau, h) and _divides(self.T, h):
                return h
        raise ConfigError(
            f"no step near {target} divides tau={self.tau}, T={self.T}, "
            f"and block {base}; choose commensurate durations"
        )

    def drift_callable(self, spec):
        if self.drift_source == "closed_form":
            return closed_form_drift(spec)
        budget = DriftEstimatorBudget(
            burn_in=self.estimator["burn_in"],
            horizon=self.estimator["horizon"],
            replicas=self.estimator["replicas"],
        )
        return EstimatedDriftSource(
            spec, budget, self.estimator["h"], self.seed,
            quant=self.estimator["quant"],
        )


@dataclass(eq=False)
class ExperimentReport:
    experiment: str
    scenario_digest: str
    rows: list
    gates: list
    warnings: list
    runtime_seconds: float
    reproducibility_hash: str
    frozen_summary: dict | None = None

    @property
    def passed(self) -> bool:
        return all(g["passed"] for g in self.gates)

    @property
    def had_divergence(self) -> bool:
        return any(r.get("extra", {}).get("error_type") == "DivergenceError"
                   for r in self.rows)

    def csv_text(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for row in self.rows:
            extra = json.dumps(row.get("extra", {}), sort_keys=True,
                               separators=(",", ":"))
            cells = [
                str(SCHEMA_VERSION),
                self.experiment,
                _fmt(row.get("epsilon")),
                _fmt(row.get("delta")),
                _fmt(row.get("p")),
                _fmt(row.get("paths")),
                _fmt(row.get("value")),
                _fmt(row.get("std_error")),
                '"' + extra.replace('"', '""') + '"',
            ]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "scenario_digest": self.scenario_digest,
            "rows": self.rows,
            "gates": self.gates,
            "warnings": self.warnings,
            "runtime_seconds": self.runtime_seconds,
            "reproducibility_hash": self.reproducibility_hash,
            "frozen_summary": self.frozen_summary,
            "passed": self.passed,
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "report.csv"
        json_path = out / "report.json"
        csv_path.write_text(self.csv_text())
        json_path.write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")
        return csv_path, json_path


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _finish(scenario: Scenario, rows, gates, warns, t0, frozen_summary=None) -> ExperimentReport:
    report = ExperimentReport(
        experiment=scenario.experiment,
        scenario_digest=scenario.digest(),
        rows=rows,
        gates=gates,
        warnings=list(warns),
        runtime_seconds=time.perf_counter() - t0,
        reproducibility_hash="",
        frozen_summary=frozen_summary,
    )
    report.reproducibility_hash = hashlib.sha256(report.csv_text().encode()).hexdigest()
    return report


def _run_tasks(fn, payloads, threads):
    if threads <= 1 or len(payloads) <= 1:
        return [fn(pl) for pl in payloads]
    chunk = max(1, math.ceil(len(payloads) / (threads * 4)))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, payloads, chunksize=chunk))


def _monotone_gate(moments, std_errors):
    """Nonincreasing check allowing one inversion inside overlapping 2-sigma bars."""
    soft = 0
    hard = 0
    for i in range(len(moments) - 1):
        if moments[i + 1] > moments[i]:
            lo_next = moments[i + 1] - 2.0 * std_errors[i + 1]
            hi_here = moments[i] + 2.0 * std_errors[i]
            if lo_next <= hi_here:
                soft += 1
            else:
                hard += 1
    passed = hard == 0 and soft <= 1
    return {
        "name": "monotone_trend",
        "passed": passed,
        "detail": f"{soft} soft inversion(s), {hard} hard inversion(s) over {len(moments)} rows",
    }


# ---------------------------------------------------------------- converge

def _converge_value(config: dict, epsilon: float, h: float, path: int) -> float:
    scen = Scenario.from_config(config)
    spec = scen.build_spec()
    grid = make_grid(scen.T, h, scen.tau)
    xi = scen.materialize_segment("xi", h, spec.n)
    eta = scen.materialize_segment("eta", h, spec.n)
    fac = StreamFactory(scen.seed, spec.m)
    coupled = simulate_coupled(
        spec, xi, eta, epsilon, grid,
        fac.stream(path, W1), fac.stream(path, W2),
        kappa_stab=scen.kappa_stab,
    )
    # Fresh stream with the same address: the averaged equation replays
    # the identical W1 increments (pathwise coupling).
    averaged = simulate_averaged(spec, xi, scen.drift_callable(spec), grid,
                                 fac.stream(path, W1))
    return sup_distance(coupled, averaged, (0.0, scen.T))


def _converge_task(payload):
    try:
        val = _converge_value(payload["config"], payload["epsilon"],
                              payload["h"], payload["path"])
        return ("ok", float(val))
    except TwoscaleError as exc:
        return ("err", type(exc).__name__, str(exc))


def run_converge(scenario: Scenario) -> ExperimentReport:
    """Strong-limit experiment: E sup |X^eps - Xbar|^p per epsilon.

    Per path, the coupled pair and the averaged equation run under one
    W1 stream; the sup gap over [0, T] feeds a p-th moment per epsilon.
    Gates: the moment sequence must trend down as epsilon does (one soft
    inversion allowed), the last moment must be below a third of the
    first, and every row must complete.
    """
    t0 = time.perf_counter()
    if not scenario.epsilons:
        raise UsageError("converge needs a non-empty epsilons list")
    eps_desc = sorted(scenario.epsilons, reverse=True)
    payloads = []
    h_by_eps = {}
    for eps in eps_desc:
        h_by_eps[eps] = scenario.resolve_h(epsilon=eps)
        for path in range(scenario.paths):
            payloads.append({
                "config": scenario.config, "epsilon": eps,
                "h": h_by_eps[eps], "path": path,
            })
    results = _run_tasks(_converge_task, payloads, scenario.threads)

    rows = []
    ok_rows = []
    idx = 0
    for eps in eps_desc:
        chunk = results[idx: idx + scenario.paths]
        idx += scenario.paths
        errors = [r for r in chunk if r[0] == "err"]
        if errors:
            kind, msg = errors[0][1], errors[0][2]
            rows.append({
                "epsilon": eps, "delta": None, "p": scenario.p,
                "paths": scenario.paths, "value": None, "std_error": None,
                "extra": {"kind": "sup_gap_moment", "h": h_by_eps[eps],
                          "error_type": kind, "error": msg,
                          "failed_paths": len(errors)},
            })
            continue
        moment = p_moment([r[1] for r in chunk], scenario.p)
        row = {
            "epsilon": eps, "delta": None, "p": scenario.p,
            "paths": moment.paths, "value": moment.value,
            "std_error": moment.std_error,
            "extra": {"kind": "sup_gap_moment", "h": h_by_eps[eps]},
        }
        rows.append(row)
        ok_rows.append(row)

    fit = None
    fit_rows = [r for r in reversed(ok_rows) if r["value"] > 0.0]
    if len(fit_rows) >= 3:
        try:
            fit = slope_fit([r["epsilon"] for r in fit_rows],
                            [r["value"] for r in fit_rows])
        except UsageError:
            fit = None
    if fit is not None:
        rows.append({
            "epsilon": None, "delta": None, "p": scenario.p,
            "paths": scenario.paths, "value": fit.slope, "std_error": None,
            "extra": {"kind": "slope_fit", "intercept": fit.intercept,
                      "r_squared": fit.r_squared, "points": len(fit.xs)},
        })

    gates = _trend_gates(ok_rows, complete=len(ok_rows) == len(eps_desc))
    return _finish(scenario, rows, gates, [], t0)


def _trend_gates(ok_rows, complete: bool):
    moments = [r["value"] for r in ok_rows]
    ses = [r["std_error"] for r in ok_rows]
    gates = []
    if len(moments) >= 2:
        gates.append(_monotone_gate(moments, ses))
        first, last = moments[0], moments[-1]
        degenerate = first <= 1e-10
        reduced = degenerate or last <= first / 3.0
        gates.append({
            "name": "final_reduction",
            "passed": bool(reduced),
            "detail": ("all moments at roundoff level" if degenerate
                       else f"first={first:.6g}, last={last:.6g}"),
        })
    else:
        gates.append({"name": "monotone_trend", "passed": True,
                      "detail": "fewer than 2 rows; trivially satisfied"})
    gates.append({"name": "rows_complete", "passed": complete,
                  "detail": f"{len(ok_rows)} successful row(s)"})
    return gates


# ---------------------------------------------------------- auxiliary gap

def _resolve_schedule(scenario: Scenario, epsilon: float):
    if scenario.delta == "auto":
        return khasminskii_delta(epsilon, scenario.tau), None
    delta = float(scenario.delta)
    n = max(1, round(scenario.tau / delta))
    snapped = scenario.tau / n
    warn = None
    if abs(snapped - delta) > 1e-9 * delta:
        warn = f"delta={delta} snapped to tau/{n}={snapped}"
    return DeltaSchedule(epsilon=epsilon, delta_raw=delta, delta=snapped,
                         N_delta=n), warn


def _aux_value(config: dict, epsilon: float, h: float, path: int):
    scen = Scenario.from_config(config)
    spec = scen.build_spec()
    schedule, _ = _resolve_schedule(scen, epsilon)
    grid = make_grid(scen.T, h, scen.tau)
    xi = scen.materialize_segment("xi", h, spec.n)
    eta = scen.materialize_segment("eta", h, spec.n)
    fac = StreamFactory(scen.seed, spec.m)
    pair = simulate_auxiliary(
        spec, xi, eta, epsilon, schedule, grid,
        fac.stream(path, W1), fac.stream(path, W2),
        kappa_stab=scen.kappa_stab,
    )
    x_gap = sup_distance(pair.coupled, pair.auxiliary, (0.0, scen.T))
    y = pair.coupled.path("fast")
    yt = pair.auxiliary.path("fast")
    ts = grid.tau_steps
    audit = 0.0
    y_gap = 0.0
    for i in pair.reset_indices:
        point = float(np.linalg.norm(yt[i] - y[i]))
        audit = max(audit, point)
        diff = yt[i - ts: i + 1] - y[i - ts: i + 1]
        seg_gap = float(np.sqrt((diff * diff).sum(axis=1)).max())
        y_gap = max(y_gap, seg_gap)
    return x_gap, y_gap, audit


def _aux_task(payload):
    try:
        x_gap, y_gap, audit = _aux_value(payload["config"], payload["epsilon"],
                                         payload["h"], payload["path"])
        return ("ok", float(x_gap), float(y_gap), float(audit))
    except TwoscaleError as exc:
        return ("err", type(exc).__name__, str(exc))


def run_auxiliary_gap(scenario: Scenario) -> ExperimentReport:
    """Block-frozen construction error: E sup |X - Xtilde|^p per epsilon.

    Alongside the slow gap moment, each epsilon row reports the moment of
    the worst fast window gap over block boundaries and the reset audit
    (max pointwise |Ytilde - Y| at boundaries, exactly 0 by construction).
    """
    t0 = time.perf_counter()
    if not scenario.epsilons:
        raise UsageError("auxiliary_gap needs a non-empty epsilons list")
    eps_desc = sorted(scenario.epsilons, reverse=True)
    warns = []
    payloads = []
    sched_by_eps = {}
    h_by_eps = {}
    for eps in eps_desc:
        schedule, warn = _resolve_schedule(scenario, eps)
        if warn:
            warns.append(warn)
        sched_by_eps[eps] = schedule
        h_by_eps[eps] = scenario.resolve_h(epsilon=eps, anchor=schedule.delta)
        for path in range(scenario.paths):
            payloads.append({
                "config": scenario.config, "epsilon": eps,
                "h": h_by_eps[eps], "path": path,
            })
    results = _run_tasks(_aux_task, payloads, scenario.threads)

    rows = []
    ok_rows = []
    idx = 0
    for eps in eps_desc:
        chunk = results[idx: idx + scenario.paths]
        idx += scenario.paths
        delta = sched_by_eps[eps].delta
        errors = [r for r in chunk if r[0] == "err"]
        if errors:
            kind, msg = errors[0][1], errors[0][2]
            rows.append({
                "epsilon": eps, "delta": delta, "p": scenario.p,
                "paths": scenario.paths, "value": None, "std_error": None,
                "extra": {"kind": "aux_slow_gap_moment", "h": h_by_eps[eps],
                          "error_type": kind, "error": msg,
                          "failed_paths": len(errors)},
            })
            continue
        x_moment = p_moment([r[1] for r in chunk], scenario.p)
        y_moment = p_moment([r[2] for r in chunk], scenario.p)
        audit_max = max(r[3] for r in chunk)
        row = {
            "epsilon": eps, "delta": delta, "p": scenario.p,
            "paths": x_moment.paths, "value": x_moment.value,
            "std_error": x_moment.std_error,
            "extra": {"kind": "aux_slow_gap_moment", "h": h_by_eps[eps],
                      "N_delta": sched_by_eps[eps].N_delta,
                      "reset_audit_max": audit_max},
        }
        rows.append(row)
        rows.append({
            "epsilon": eps, "delta": delta, "p": scenario.p,
            "paths": y_moment.paths, "value": y_moment.value,
            "std_error": y_moment.std_error,
            "extra": {"kind": "aux_fast_checkpoint_gap_moment", "h": h_by_eps[eps]},
        })
        rows.append({
            "epsilon": eps, "delta": delta, "p": None,
            "paths": scenario.paths, "value": audit_max, "std_error": None,
            "extra": {"kind": "reset_audit", "h": h_by_eps[eps]},
        })
        ok_rows.append(row)

    gates = _trend_gates(ok_rows, complete=len(ok_rows) == len(eps_desc))
    if len(ok_rows) >= 2:
        big, small = ok_rows[0], ok_rows[-1]
        sigma = math.sqrt(big["std_error"] ** 2 + small["std_error"] ** 2)
        separated = big["value"] - small["value"] > 2.0 * sigma
        gates.append({
            "name": "extremes_separated_2sigma",
            "passed": bool(separated),
            "detail": (f"moment({big['epsilon']})={big['value']:.6g} vs "
                       f"moment({small['epsilon']})={small['value']:.6g}, "
                       f"2*sigma={2 * sigma:.3g}"),
        })
    audits = [r["extra"]["reset_audit_max"] for r in ok_rows]
    gates.append({
        "name": "reset_audit_zero",
        "passed": bool(ok_rows) and all(a == 0.0 for a in audits),
        "detail": f"max over rows: {max(audits) if audits else 'n/a'}",
    })
    return _finish(scenario, rows, gates, warns, t0)


# ----------------------------------------------------- segment continuity

def _segcont_values(config: dict, epsilon: float, h: float, deltas, times, path: int):
    scen = Scenario.from_config(config)
    spec = scen.build_spec()
    grid = make_grid(scen.T, h, scen.tau)
    xi = scen.materialize_segment("xi", h, spec.n)
    eta = scen.materialize_segment("eta", h, spec.n)
    fac = StreamFactory(scen.seed, spec.m)
    coupled = simulate_coupled(
        spec, xi, eta, epsilon, grid,
        fac.stream(path, W1), fac.stream(path, W2),
        kappa_stab=scen.kappa_stab,
    )
    return [segment_displacement_moment(coupled, d, scen.p, times) for d in deltas]


def _segcont_task(payload):
    try:
        vals = _segcont_values(payload["config"], payload["epsilon"], payload["h"],
                               payload["deltas"], payload["times"], payload["path"])
        return ("ok", [float(v) for v in vals])
    except TwoscaleError as exc:
        return ("err", type(exc).__name__, str(exc))


def run_segment_continuity(scenario: Scenario) -> ExperimentReport:
    """Window displacement scaling: E ||X_t - X_{t_delta}||^p vs delta.

    One ensemble of coupled paths is reused across the delta sweep; the
    fitted log-log slope must clear 0.9 * (p - 2) / 2 (one-sided, since
    the per-block bound has a steeper exponent than the global one).
    """
    t0 = time.perf_counter()
    epsilon = scenario.epsilons[0] if scenario.epsilons else 0.05
    warns = []
    deltas = list(scenario.deltas) if scenario.deltas is not None else [
        scenario.tau / 16.0, scenario.tau / 32.0,
        scenario.tau / 64.0, scenario.tau / 128.0,
    ]
    # Snap each delta to tau/N so blocks tile the delay.
    normed = []
    for d in deltas:
        n = max(1, round(scenario.tau / d))
        nd = scenario.tau / n
        if abs(nd - d) > 1e-9 * d:
            warns.append(f"delta={d} snapped to tau/{n}={nd}")
        normed.append(nd)
    deltas = sorted(set(normed), reverse=True)
    if len(deltas) < len(normed):
        warns.append("duplicate deltas merged after snapping")
    d_min = deltas[-1]
    # At least 4 nodes per smallest block so mid-block samples exist.
    h = scenario.resolve_h(epsilon=epsilon, anchor=d_min,
                           default_target=d_min / 4.0)
    for i, d in enumerate(deltas):
        k = max(1, round(d / h))
        if abs(k * h - d) > 1e-9 * d:
            warns.append(f"delta={d} snapped to {k}*h={k * h}")
            deltas[i] = k * h

    grid = make_grid(scenario.T, h, scenario.tau)
    if scenario.sample_times is not None:
        times = list(scenario.sample_times)
    else:
        # Block-boundary samples would make every displacement zero, and
        # a shared offset would make them delta-independent.  Odd
        # multiples of d_max/16 reduce to offsets proportional to each
        # block size across a dyadic sweep.
        d_max_steps = exact_steps(deltas[0], h, "delta")
        idxs = set()
        for j in range(8):
            r = max(1, ((2 * j + 1) * d_max_steps) // 16)
            idxs.add(min(grid.steps, j * grid.steps // 8 + r))
        times = [k * h for k in sorted(idxs) if k > 0]
    payloads = [{
        "config": scenario.config, "epsilon": epsilon, "h": h,
        "deltas": deltas, "times": times, "path": path,
    } for path in range(scenario.paths)]
    results = _run_tasks(_segcont_task, payloads, scenario.threads)

    errors = [r for r in results if r[0] == "err"]
    rows = []
    gates = []
    if errors:
        kind, msg = errors[0][1], errors[0][2]
        rows.append({
            "epsilon": epsilon, "delta": None, "p": scenario.p,
            "paths": scenario.paths, "value": None, "std_error": None,
            "extra": {"kind": "segment_displacement_moment", "h": h,
                      "error_type": kind, "error": msg,
                      "failed_paths": len(errors)},
        })
        gates.append({"name": "rows_complete", "passed": False,
                      "detail": f"{len(errors)} failed path(s)"})
        return _finish(scenario, rows, gates, warns, t0)

    per_path = np.array([r[1] for r in results])  # (paths, n_deltas)
    moments = per_path.mean(axis=0)
    ses = per_path.std(axis=0, ddof=1) / math.sqrt(len(results))
    for j, d in enumerate(deltas):
        rows.append({
            "epsilon": epsilon, "delta": d, "p": scenario.p,
            "paths": scenario.paths, "value": float(moments[j]),
            "std_error": float(ses[j]),
            "extra": {"kind": "segment_displacement_moment", "h": h,
                      "sample_times": len(times)},
        })

    floor = 0.9 * (scenario.p - 2.0) / 2.0
    if len(deltas) >= 3 and (moments > 0.0).all():
        fit = slope_fit(list(reversed(deltas)), list(reversed(moments.tolist())))
        rows.append({
            "epsilon": epsilon, "delta": None, "p": scenario.p,
            "paths": scenario.paths, "value": fit.slope, "std_error": None,
            "extra": {"kind": "slope_fit", "intercept": fit.intercept,
                      "r_squared": fit.r_squared, "points": len(fit.xs)},
        })
        gates.append({
            "name": "slope_floor",
            "passed": bool(fit.slope >= floor),
            "detail": f"slope={fit.slope:.4f}, floor={floor:.4f}",
        })
    else:
        gates.append({
            "name": "slope_floor",
            "passed": False,
            "detail": "need >= 3 positive moments to fit a slope",
        })
    gates.append({"name": "rows_complete", "passed": True,
                  "detail": f"{len(results)} path(s)"})
    return _finish(scenario, rows, gates, warns, t0)


# ------------------------------------------------------- frozen / mixing

def _zeta_digest(seg: Segment) -> str:
    payload = seg.values.tobytes() + repr((seg.tau, seg.h)).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def _offset_segment(seg: Segment, offset: float) -> Segment:
    return Segment(seg.tau, seg.h, seg.values + offset)


def run_frozen(scenario: Scenario) -> ExperimentReport:
    """Stationary averaged-drift estimate plus the mixing-rate fit."""
    t0 = time.perf_counter()
    spec = scenario.build_spec()
    h = scenario.resolve_h(default_target=scenario.tau / 1000.0)
    zeta = scenario.materialize_segment("xi", h, spec.n)
    eta = scenario.materialize_segment("eta", h, spec.n)
    fac = StreamFactory(scenario.seed, spec.m)
    warns = []

    grid_est = make_grid(scenario.burn_in + scenario.horizon, h, scenario.tau)
    with _warnings.catch_warnings(record=True) as caught:
        _warnings.simplefilter("always")
        est = estimate_averaged_drift(
            spec, zeta, scenario.burn_in, scenario.horizon,
            scenario.replicas, grid_est, fac, eta=eta,
        )
    warns.extend(str(w.message) for w in caught)

    rows = [{
        "epsilon": None, "delta": None, "p": None,
        "paths": scenario.replicas,
        "value": float(est.value[0]) if spec.n == 1 else float(np.linalg.norm(est.value)),
        "std_error": float(np.linalg.norm(est.std_error)),
        "extra": {"kind": "bbar_estimate", "h": h,
                  "bbar": [float(v) for v in est.value],
                  "std_error": [float(s) for s in est.std_error],
                  "burn_in": scenario.burn_in, "horizon": scenario.horizon,
                  "zeta_digest": _zeta_digest(zeta)},
    }]

    fit, fit_rows, fit_gate = _mixing_part(scenario, spec, zeta, eta, h, fac)
    rows.extend(fit_rows)
    gates = [fit_gate]

    frozen_summary = {
        "zeta_digest": _zeta_digest(zeta),
        "bbar": [float(v) for v in est.value],
        "std_error": [float(s) for s in est.std_error],
        "fitted_rate": fit.fitted_rate if fit is not None else None,
        "r_squared": fit.r_squared if fit is not None else None,
    }
    return _finish(scenario, rows, gates, warns, t0, frozen_summary=frozen_summary)


def _mixing_part(scenario: Scenario, spec, zeta, eta, h, fac):
    grid = make_grid(scenario.checkpoints * scenario.tau, h, scenario.tau)
    if scenario.eta_prime is not None:
        eta_prime = scenario.materialize_segment("eta_prime", h, spec.n)
    else:
        eta_prime = _offset_segment(eta, 1.0)
    try:
        fit = mixing_decay(spec, zeta, eta, eta_prime, grid,
                           scenario.mixing_replicas, fac)
    except DegenerateFitError as exc:
        row = {
            "epsilon": None, "delta": None, "p": None,
            "paths": scenario.mixing_replicas, "value": None, "std_error": None,
            "extra": {"kind": "mixing_fit", "degenerate": True, "detail": str(exc),
                      "h": h},
        }
        gate = {"name": "mixing_rate_positive", "passed": True,
                "detail": "gap contracted below the fit floor (strong mixing)"}
        return None, [row], gate
    row = {
        "epsilon": None, "delta": None, "p": None,
        "paths": scenario.mixing_replicas, "value": fit.fitted_rate,
        "std_error": None,
        "extra": {"kind": "mixing_fit", "r_squared": fit.r_squared,
                  "times": fit.times, "log_gaps": fit.log_gaps, "h": h},
    }
    gate = {"name": "mixing_rate_positive", "passed": bool(fit.fitted_rate > 0.0),
            "detail": f"fitted_rate={fit.fitted_rate:.4f}, r2={fit.r_squared:.4f}"}
    return fit, [row], gate


def run_mixing(scenario: Scenario) -> ExperimentReport:
    """Synchronous-coupling contraction fit only."""
    t0 = time.perf_counter()
    spec = scenario.build_spec()
    h = scenario.resolve_h(default_target=scenario.tau / 1000.0)
    zeta = scenario.materialize_segment("xi", h, spec.n)
    eta = scenario.materialize_segment("eta", h, spec.n)
    fac = StreamFactory(scenario.seed, spec.m)
    fit, rows, gate = _mixing_part(scenario, spec, zeta, eta, h, fac)
    summary = None
    if fit is not None:
        summary = {"zeta_digest": _zeta_digest(zeta), "bbar": None,
                   "std_error": None, "fitted_rate": fit.fitted_rate,
                   "r_squared": fit.r_squared}
    return _finish(scenario, rows, [gate], [], t0, frozen_summary=summary)


# ----------------------------------------------------------------- check

def run_check(scenario: Scenario) -> ExperimentReport:
    """Sampled structure checks: contraction, growth, start window, purity."""
    t0 = time.perf_counter()
    spec = scenario.build_spec()
    h = scenario.resolve_h(default_target=scenario.tau / 64.0)
    xi = scenario.materialize_segment("xi", h, spec.n)

    candidate = None
    if spec.benchmark is not None and spec.benchmark.dissipative:
        candidate = spec.benchmark.lambda_pair
    diss = check_dissipativity(
        spec, random_point_sampler(scenario.tau, h, spec.n),
        scenario.trials, candidate, rng_seed=scenario.seed,
    )
    growth = check_growth_and_lipschitz(
        spec, random_segment_pair_sampler(scenario.tau, h, spec.n),
        scenario.trials, rng_seed=scenario.seed + 1,
    )
    seg_ok = check_initial_segment(xi, scenario.lambda3_cap)
    modulus = lipschitz_modulus(xi)
    pure = spot_check_purity(spec, h=h, rng_seed=scenario.seed + 2)

    rows = [
        {"epsilon": None, "delta": None, "p": None, "paths": diss.sample_count,
         "value": diss.worst_violation, "std_error": None,
         "extra": {"kind": "dissipativity", "lambda1": diss.lambda1,
                   "lambda2": diss.lambda2, "verdict": diss.verdict,
                   "candidate_supplied": candidate is not None}},
        {"epsilon": None, "delta": None, "p": None, "paths": scenario.trials,
         "value": growth.L_estimate, "std_error": None,
         "extra": {"kind": "growth_lipschitz", "verdict": growth.verdict,
                   "witnesses": growth.max_ratio_points}},
        {"epsilon": None, "delta": None, "p": None, "paths": 1,
         "value": modulus, "std_error": None,
         "extra": {"kind": "initial_segment", "cap": scenario.lambda3_cap,
                   "verdict": "pass" if seg_ok else "fail"}},
        {"epsilon": None, "delta": None, "p": None, "paths": 1,
         "value": 1.0 if pure else 0.0, "std_error": None,
         "extra": {"kind": "coefficient_purity",
                   "verdict": "pass" if pure else "fail"}},
    ]
    gates = [
        {"name": "dissipativity", "passed": diss.passed,
         "detail": f"worst_violation={diss.worst_violation:.3g} at "
                   f"(l1={diss.lambda1:.4g}, l2={diss.lambda2:.4g})"},
        {"name": "growth_lipschitz", "passed": growth.passed,
         "detail": f"L_estimate={growth.L_estimate:.4g}"},
        {"name": "initial_segment", "passed": bool(seg_ok),
         "detail": f"modulus={modulus:.4g}, cap={scenario.lambda3_cap:.4g}"},
        {"name": "coefficient_purity", "passed": bool(pure),
         "detail": "maps returned identical values on repeated calls"
                   if pure else "a coefficient map is stateful"},
    ]
    return _finish(scenario, rows, gates, [], t0)


# -------------------------------------------------------------- simulate

def _simulate_task(payload):
    try:
        scen = Scenario.from_config(payload["config"])
        spec = scen.build_spec()
        epsilon, h, path = payload["epsilon"], payload["h"], payload["path"]
        grid = make_grid(scen.T, h, scen.tau)
        xi = scen.materialize_segment("xi", h, spec.n)
        eta = scen.materialize_segment("eta", h, spec.n)
        fac = StreamFactory(scen.seed, spec.m)
        bundle = simulate_coupled(
            spec, xi, eta, epsilon, grid,
            fac.stream(path, W1), fac.stream(path, W2),
            kappa_stab=scen.kappa_stab,
        )
        if payload.get("dump_dir"):
            _dump_bundle(bundle, Path(payload["dump_dir"]),
                         f"{payload['stem']}_{path}.csv")
        return ("ok", float(np.linalg.norm(bundle.endpoint("slow"))))
    except TwoscaleError as exc:
        return ("err", type(exc).__name__, str(exc))


def _dump_bundle(bundle, out_dir: Path, name: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    n = bundle.path("slow").shape[1]
    header = "t," + ",".join(f"x_{i + 1}" for i in range(n))
    fast = bundle.fast_path is not None
    if fast:
        header += "," + ",".join(f"y_{i + 1}" for i in range(n))
    lines = [header]
    times = bundle.grid.times()
    x = bundle.path("slow")
    y = bundle.path("fast") if fast else None
    for i, t in enumerate(times):
        cells = [repr(float(t))] + [repr(float(v)) for v in x[i]]
        if fast:
            cells += [repr(float(v)) for v in y[i]]
        lines.append(",".join(cells))
    (out_dir / name).write_text("\n".join(lines) + "\n")


def run_simulate(scenario: Scenario, *, dump_dir=None, stem: str = "scenario") -> ExperimentReport:
    """Plain coupled ensemble; optionally dumps per-path trajectory CSVs."""
    t0 = time.perf_counter()
    epsilon = scenario.epsilons[0] if scenario.epsilons else 0.05
    h = scenario.resolve_h(epsilon=epsilon)
    payloads = [{
        "config": scenario.config, "epsilon": epsilon, "h": h, "path": path,
        "dump_dir": str(dump_dir) if dump_dir is not None else None,
        "stem": stem,
    } for path in range(scenario.paths)]
    results = _run_tasks(_simulate_task, payloads, scenario.threads)
    errors = [r for r in results if r[0] == "err"]
    rows = []
    if errors:
        kind, msg = errors[0][1], errors[0][2]
        rows.append({
            "epsilon": epsilon, "delta": None, "p": 1.0,
            "paths": scenario.paths, "value": None, "std_error": None,
            "extra": {"kind": "endpoint_slow_norm", "h": h,
                      "error_type": kind, "error": msg,
                      "failed_paths": len(errors)},
        })
        gates = [{"name": "rows_complete", "passed": False,
                  "detail": f"{len(errors)} failed path(s)"}]
        return _finish(scenario, rows, gates, [], t0)
    endpoints = [r[1] for r in results]
    if len(endpoints) >= 2:
        moment = p_moment(endpoints, 1.0)
        value, se, paths = moment.value, moment.std_error, moment.paths
    else:
        value, se, paths = float(endpoints[0]), 0.0, 1
    rows.append({
        "epsilon": epsilon, "delta": None, "p": 1.0, "paths": paths,
        "value": value, "std_error": se,
        "extra": {"kind": "endpoint_slow_norm", "h": h,
                  "dumped": dump_dir is not None},
    })
    gates = [{"name": "rows_complete", "passed": True,
              "detail": f"{len(results)} path(s)"}]
    return _finish(scenario, rows, gates, [], t0)


_RUNNERS = {
    "converge": run_converge,
    "auxiliary_gap": run_auxiliary_gap,
    "segment_continuity": run_segment_continuity,
    "frozen": run_frozen,
    "mixing": run_mixing,
    "check": run_check,
    "simulate": run_simulate,
}


def run_scenario(scenario: Scenario, **kwargs) -> ExperimentReport:
    runner = _RUNNERS[scenario.experiment]
    return runner(scenario, **kwargs)
