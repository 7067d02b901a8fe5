"""Error, convergence-order and energy accounting for simulation traces."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .coupling import MasterConfig, SimulationTrace, run_master

__all__ = [
    "DEFAULT_H_SERIES",
    "endpoint_error",
    "ConvergenceStudy",
    "fit_order",
    "convergence_study",
    "SpanEnergy",
    "EnergyReport",
    "energy_drift",
    "merge_spans",
    "BalanceReport",
    "interval_balance_report",
]

DEFAULT_H_SERIES = (0.2, 0.1, 0.05, 0.025, 0.0125)


def _state_at(trace, t: float) -> np.ndarray:
    if isinstance(trace, SimulationTrace):
        if t == trace.sample_times[-1]:
            return trace.final_state
        return trace.state(t)
    return np.asarray(trace(t), dtype=float)


def endpoint_error(trace, reference: Callable[[float], np.ndarray], t_end: Optional[float] = None) -> float:
    """Euclidean norm of ``trace(t_end) - reference(t_end)``.

    ``trace`` is a :class:`SimulationTrace` or any callable ``t -> state``.
    ``t_end`` defaults to the end of the trace.
    """
    if t_end is None:
        if not isinstance(trace, SimulationTrace):
            raise ValueError("t_end is required for a callable trace")
        t_end = float(trace.sample_times[-1])
    diff = _state_at(trace, t_end) - np.asarray(reference(t_end), dtype=float)
    return float(np.linalg.norm(diff))


@dataclass(frozen=True)
class ConvergenceStudy:
    """Endpoint errors over a series of exchange step sizes.

    ``component_errors[i, j]`` is the absolute error of state component ``j``
    at ``H[i]``. ``slope`` and ``intercept`` fit ``log(error)`` against
    ``log(H)`` in the least-squares sense.
    """

    H: np.ndarray
    errors: np.ndarray
    component_errors: Optional[np.ndarray] = None
    slope: float = float("nan")
    intercept: float = float("nan")


def _fit(H, errors) -> tuple[float, float]:
    H = np.asarray(H, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(H) != len(errors):
        raise ValueError("one error per step size required")
    if len(H) < 4:
        raise ValueError("order fit needs at least 4 step sizes")
    if np.any(~(errors > 0)) or np.any(~(H > 0)):
        raise ValueError("errors and step sizes must be positive for a log-log fit")
    slope, intercept = np.polyfit(np.log(H), np.log(errors), 1)
    return float(slope), float(intercept)


def fit_order(study_or_H, errors=None) -> float:
    """Least-squares slope of ``log(error)`` over ``log(H)``.

    Accepts a :class:`ConvergenceStudy` or the two arrays.
    """
    if isinstance(study_or_H, ConvergenceStudy):
        return _fit(study_or_H.H, study_or_H.errors)[0]
    return _fit(study_or_H, errors)[0]


def _convergence_cell(args):
    model, params, cfg = args
    from .models import build_problem

    problem = build_problem(model, params)
    trace = run_master(problem.blocks, problem.connections, problem.x0, cfg, problem.energy)
    ref = np.asarray(problem.reference(cfg.t_end), dtype=float)
    return trace.final_state - ref


def convergence_study(
    model: str,
    cfg: MasterConfig,
    H_list: Sequence[float] = DEFAULT_H_SERIES,
    params: Optional[dict] = None,
    workers: int = 1,
) -> ConvergenceStudy:
    """Run ``model`` once per exchange step and fit the observed order.

    Cells are independent; with ``workers > 1`` they run in separate
    processes. Results do not depend on ``workers``.
    """
    cells = [(model, dict(params or {}), replace(cfg, H=float(H))) for H in H_list]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            diffs = list(pool.map(_convergence_cell, cells))
    else:
        diffs = [_convergence_cell(c) for c in cells]
    comp = np.abs(np.array(diffs))
    errors = np.linalg.norm(np.array(diffs), axis=1)
    H = np.array(H_list, dtype=float)
    try:
        slope, intercept = _fit(H, errors)
    except ValueError:
        slope = intercept = float("nan")
    return ConvergenceStudy(H, errors, comp, slope, intercept)


# -- energy ----------------------------------------------------------------------

def merge_spans(spans, t0: float = -np.inf, t1: float = np.inf) -> list[tuple[float, float]]:
    """Union of spans (of all blocks), clipped to ``[t0, t1]``."""
    merged: list[list[float]] = []
    for s in sorted((max(s.start, t0), min(s.end, t1)) for s in spans):
        if s[1] < s[0]:
            continue
        if merged and s[0] <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], s[1])
        else:
            merged.append([s[0], s[1]])
    return [(a, b) for a, b in merged]


@dataclass(frozen=True)
class SpanEnergy:
    start: float
    end: float
    jump: float


@dataclass(frozen=True)
class EnergyReport:
    """Energy bookkeeping of one trace.

    Attributes
    ----------
    times, energies : ndarray
        Energy on the output grid.
    drift : float
        ``max |E(t) - E(0)| / E(0)`` over the output grid.
    exchange_times, exchange_energies : ndarray
    interval_production : ndarray
        ``E(T_k) - E(T_{k-1})`` per interval.
    span_production : ndarray
        Energy change inside guard spans, per interval.
    outside_production : ndarray
        ``interval_production - span_production``.
    spans : list of SpanEnergy
        Merged guard spans with their energy jump.
    """

    times: np.ndarray
    energies: np.ndarray
    drift: float
    exchange_times: np.ndarray
    exchange_energies: np.ndarray
    interval_production: np.ndarray
    span_production: np.ndarray
    outside_production: np.ndarray
    spans: list[SpanEnergy]

    @property
    def total_production(self) -> float:
        return float(self.exchange_energies[-1] - self.exchange_energies[0])

    @property
    def span_fraction(self) -> float:
        """Share of the absolute energy production that falls inside spans."""
        inside = float(np.sum(np.abs(self.span_production)))
        outside = float(np.sum(np.abs(self.outside_production)))
        if inside + outside == 0:
            return 1.0
        return inside / (inside + outside)


def energy_drift(trace: SimulationTrace, energy: Optional[Callable[[np.ndarray], float]] = None) -> EnergyReport:
    """Drift, per-interval production and attribution to guard spans.

    Span energy jumps are evaluated from the dense block solutions, so a span
    that crosses an exchange time is split between the two intervals.
    """
    energy = energy or trace.energy
    if energy is None:
        raise ValueError("trace carries no energy functional and none was given")
    if trace.energies is not None and energy is trace.energy:
        energies = trace.energies
    else:
        energies = np.array([float(energy(x)) for x in trace.states])

    def E(t):
        return float(energy(_state_at(trace, t)))

    T = trace.exchange_times
    EK = np.array([E(t) for t in T])
    prod = np.diff(EK)
    spans = merge_spans(trace.spans, T[0], T[-1])
    span_prod = np.zeros(len(prod))
    span_list = []
    for a, b in spans:
        span_list.append(SpanEnergy(a, b, E(b) - E(a)))
        k0 = trace.interval_of(a)
        for k in range(k0, len(prod)):
            lo, hi = max(a, T[k]), min(b, T[k + 1])
            if lo >= b or T[k] > b:
                break
            if hi > lo:
                span_prod[k] += E(hi) - E(lo)
    e0 = energies[0]
    drift = float(np.max(np.abs(energies - e0)) / abs(e0)) if e0 != 0 else float("inf")
    return EnergyReport(
        times=trace.sample_times.copy(),
        energies=np.asarray(energies, dtype=float),
        drift=drift,
        exchange_times=T.copy(),
        exchange_energies=EK,
        interval_production=prod,
        span_production=span_prod,
        outside_production=prod - span_prod,
        spans=span_list,
    )


# -- balance errors ---------------------------------------------------------------

@dataclass(frozen=True)
class BalanceReport:
    """Per-interval balance errors of every exchanged component.

    ``columns[j]`` names component ``j`` as ``(connection, component)``.
    ``refed[k]`` is the correction added on interval ``k`` (zero for schemes
    without balance correction).
    """

    interval_start: np.ndarray
    interval_end: np.ndarray
    columns: list[tuple[int, int]]
    errors: np.ndarray
    refed: np.ndarray


def interval_balance_report(trace: SimulationTrace) -> BalanceReport:
    cols = [(c, j) for c, conn in enumerate(trace.connections) for j in range(conn.width)]
    T = trace.exchange_times
    return BalanceReport(T[:-1].copy(), T[1:].copy(), cols,
                         trace.balance_errors.copy(), trace.refed.copy())
