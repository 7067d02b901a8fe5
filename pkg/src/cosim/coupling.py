"""Master algorithms for explicit co-simulation.

Subsystems are integrated independently over an exchange interval
``[T_{k-1}, T_k]`` with inputs frozen as extrapolants built at ``T_{k-1}``.
At every exchange time the master samples all outputs, updates the input
histories and builds the next set of extrapolants. Three schemes are provided:

``plain``
    inputs are polynomial extrapolants of the exchanged outputs.
``balance_corrected``
    the integral error of the previous interval is added back through a
    unit-integral hat.
``power_negotiated``
    both sides of a power port report the power they see, agree on a single
    antisymmetric value and one input component is reconstructed during the
    interval so that the realized port power equals the agreed extrapolant.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .extrapolation import (
    Extrapolant,
    SampleHistory,
    balance_error,
    build_constant,
    build_hermite_linear,
    build_linear,
    refeed_shape,
)
from .solvers import DenseSolution, IntegrationError, IntegratorConfig, integrate, join_dense

__all__ = [
    "Scheme",
    "CouplingError",
    "NonMonotonePowerMap",
    "SubsystemBlock",
    "Connection",
    "MasterConfig",
    "Span",
    "InversionResult",
    "SimulationTrace",
    "negotiate_power",
    "invert_power",
    "exchange_plain",
    "exchange_balance_corrected",
    "exchange_power_negotiated",
    "run_master",
]


class Scheme(str, enum.Enum):
    PLAIN = "plain"
    BALANCE_CORRECTED = "balance_corrected"
    POWER_NEGOTIATED = "power_negotiated"


class CouplingError(RuntimeError):
    """A co-simulation run could not be completed.

    ``interval`` is the 1-based index of the exchange interval that failed,
    or None for wiring errors detected before the run.
    """

    def __init__(self, message: str, interval: Optional[int] = None):
        if interval is not None:
            message = f"interval {interval}: {message}"
        super().__init__(message)
        self.interval = interval


class NonMonotonePowerMap(CouplingError):
    pass


@dataclass(frozen=True)
class SubsystemBlock:
    """One ODE subsystem ``x' = rhs(t, x, u)`` with outputs ``output_map(t, x, u)``.

    The optional power maps describe the power flowing into the block through
    its (single) power port: ``power_map(x, u)`` and its time derivative
    ``power_rate_map(x, u)``, where ``u`` includes derivative inputs where
    needed. ``power_inverse(target, x, u)`` solves ``power_map`` for the
    replaced input component; the value of that component in ``u`` is ignored.
    Without ``power_inverse`` the power map is assumed affine in the replaced
    component.
    """

    name: str
    state_dim: int
    input_dim: int
    output_dim: int
    rhs: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    output_map: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    power_map: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    power_rate_map: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    power_inverse: Optional[Callable[[float, np.ndarray, np.ndarray], float]] = None


@dataclass(frozen=True)
class Connection:
    """Routes outputs of ``source`` to inputs of ``target``.

    ``source_derivatives[i]`` optionally names the source output holding the
    time derivative of ``source_outputs[i]``; it feeds Hermite extrapolation.
    For a power-coupled connection, ``replaced_component`` is the index in the
    target's input vector that is reconstructed from the negotiated power.
    """

    source: int
    target: int
    source_outputs: tuple[int, ...]
    target_inputs: tuple[int, ...]
    source_derivatives: Optional[tuple[Optional[int], ...]] = None
    power_coupled: bool = False
    replaced_component: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "source_outputs", tuple(int(i) for i in self.source_outputs))
        object.__setattr__(self, "target_inputs", tuple(int(i) for i in self.target_inputs))
        if len(self.source_outputs) != len(self.target_inputs):
            raise ValueError("source_outputs and target_inputs differ in length")
        if self.source_derivatives is not None:
            der = tuple(None if d is None else int(d) for d in self.source_derivatives)
            if len(der) != len(self.source_outputs):
                raise ValueError("one derivative entry per exchanged component required")
            object.__setattr__(self, "source_derivatives", der)
        if self.power_coupled:
            if self.replaced_component is None:
                raise ValueError("power-coupled connection needs replaced_component")
            if self.replaced_component not in self.target_inputs:
                raise ValueError("replaced_component must be one of target_inputs")
        elif self.replaced_component is not None:
            raise ValueError("replaced_component given for a connection without power coupling")

    @property
    def width(self) -> int:
        return len(self.source_outputs)


@dataclass(frozen=True)
class MasterConfig:
    """Settings of one co-simulation run.

    ``t_end - t0`` must be an integer multiple of ``H`` up to round-off.
    ``samples_per_interval`` sets the uniform output grid used by the trace.
    """

    scheme: Scheme = Scheme.PLAIN
    H: float = 0.2
    t_end: float = 20.0
    degree: int = 0
    hermite: bool = False
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    inversion_epsilon: float = 1e-6
    samples_per_interval: int = 10
    t0: float = 0.0
    concurrent: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not (self.H > 0 and math.isfinite(self.H)):
            raise ValueError("H must be positive and finite")
        if not self.t_end > self.t0:
            raise ValueError("t_end must exceed t0")
        if self.degree not in (0, 1):
            raise ValueError("extrapolation degree must be 0 or 1")
        if not self.inversion_epsilon > 0:
            raise ValueError("inversion_epsilon must be positive")
        if self.samples_per_interval < 1:
            raise ValueError("samples_per_interval must be at least 1")
        n = (self.t_end - self.t0) / self.H
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(
                f"t_end - t0 = {self.t_end - self.t0!r} is not a multiple of H = {self.H!r}")

    @property
    def n_intervals(self) -> int:
        return int(round((self.t_end - self.t0) / self.H))

    def exchange_time(self, k: int) -> float:
        if k == self.n_intervals:
            return float(self.t_end)
        return self.t0 + k * self.H


@dataclass(frozen=True)
class Span:
    """Time span during which the inversion guard of ``block`` was active."""

    block: int
    start: float
    end: float


@dataclass(frozen=True)
class InversionResult:
    value: float
    singular: bool
    denominator: float


def negotiate_power(p_own: float, p_partner: float) -> float:
    """Agreed power into the own side of a port.

    Each side reports the power it sees flowing into itself. The average of
    the own view and the negated partner view is antisymmetric:
    ``negotiate_power(a, b) == -negotiate_power(b, a)`` bit for bit.
    """
    return (p_own - p_partner) / 2.0


def _affine_parts(power_map, x, u, k):
    u = np.array(u, dtype=float)
    u[k] = 0.0
    r = float(power_map(x, u))
    u[k] = 1.0
    d = float(power_map(x, u)) - r
    return r, d


def _sign(v: float) -> float:
    return -1.0 if v < 0 else 1.0


def invert_power(
    block: SubsystemBlock,
    target,
    t: float,
    x,
    rest,
    k: int,
    eps: float = 1e-6,
    previous: Optional[float] = None,
) -> InversionResult:
    """Solve ``block.power_map(x, u) = target(t)`` for ``u[k]``.

    Parameters
    ----------
    block : SubsystemBlock
    target : callable or float
        Extrapolated agreed power, evaluated at ``t``.
    t : float
    x : array_like
        Current state of the block.
    rest : array_like
        Full input vector; entry ``k`` is ignored.
    k : int
        Replaced input component.
    eps : float
        Guard threshold on the sensitivity of the power to ``u[k]``.
    previous : float, optional
        Last reconstructed value; sets the direction of the guarded value.

    Returns
    -------
    InversionResult
        ``singular`` is True when the sensitivity is below ``eps``. The value
        is then ``sign(previous) * |target - P(u_k=0)| / eps``, which keeps the
        direction of the reconstructed input.

    Raises
    ------
    NonMonotonePowerMap
        The local sensitivity at the solution disagrees in sign with the
        secant sensitivity.
    """
    if block.power_map is None:
        raise ValueError(f"block {block.name!r} has no power map")
    x = np.asarray(x, dtype=float)
    p = float(target(t)) if callable(target) else float(target)
    r, d = _affine_parts(block.power_map, x, rest, k)
    if abs(d) < eps:
        if previous is None:
            direction = _sign((p - r) * d)
        else:
            direction = _sign(previous)
        return InversionResult(direction * abs(p - r) / eps, True, d)
    u = np.array(rest, dtype=float)
    if block.power_inverse is not None:
        value = float(block.power_inverse(p, x, u))
    else:
        value = (p - r) / d
    step = max(1e-7, 1e-7 * abs(value))
    u[k] = value + step
    hi = float(block.power_map(x, u))
    u[k] = value - step
    lo = float(block.power_map(x, u))
    if (hi - lo) * d < 0:
        raise NonMonotonePowerMap(
            f"power map of block {block.name!r} is not monotone in input component {k}")
    return InversionResult(value, False, d)


# -- extrapolant construction ------------------------------------------------

class _History:
    """Append-only sample store of one connection."""

    def __init__(self, width: int):
        self.times: list[float] = []
        self.values: list[np.ndarray] = []
        self.derivatives: list[np.ndarray] = []
        self.width = width

    def append(self, t, value, derivative):
        self.times.append(float(t))
        self.values.append(np.asarray(value, dtype=float))
        self.derivatives.append(np.asarray(derivative, dtype=float))

    def tail(self, n: int = 2) -> SampleHistory:
        return SampleHistory(
            np.array(self.times[-n:]), np.array(self.values[-n:]), np.array(self.derivatives[-n:]))


def _extrapolate(hist: SampleHistory, k: int, degree: int, hermite: bool, width: float) -> Extrapolant:
    """Extrapolant for interval ``k`` (1-based) from the samples up to ``T_{k-1}``.

    A secant needs two samples, so on the first interval it is replaced by the
    constant extrapolant. Hermite extrapolation only needs the newest sample;
    rows without a derivative sample (NaN) fall back to the secant slope, or
    to a constant while only one sample exists.
    """
    if degree == 0 or (k == 1 and not hermite):
        return build_constant(hist, width)
    if not hermite:
        return build_linear(hist, width)
    der = hist.derivatives[-1]
    missing = np.isnan(der)
    if np.any(missing):
        secant = build_linear(hist, width).coeffs[1] if len(hist) > 1 else 0.0
        der = np.where(missing, secant, der)
    return build_hermite_linear(hist.values[-1], der, hist.times[-1], width)


def exchange_plain(
    connections: Sequence[Connection],
    histories: Sequence[SampleHistory],
    k: int,
    cfg: MasterConfig,
) -> list[Extrapolant]:
    """One extrapolant per connection for interval ``k`` (1-based)."""
    return [_extrapolate(h, k, cfg.degree, cfg.hermite, cfg.H) for h in histories]


def exchange_balance_corrected(
    connections: Sequence[Connection],
    histories: Sequence[SampleHistory],
    k: int,
    cfg: MasterConfig,
    previous_errors: Optional[Sequence[np.ndarray]],
) -> list[Extrapolant]:
    """Plain extrapolants plus the refeed of the previous interval's balance error.

    ``previous_errors[c]`` is the balance error of connection ``c`` on interval
    ``k-1``; it is added as ``amount * hat`` on interval ``k``. No correction
    is applied on the first interval.
    """
    plain = exchange_plain(connections, histories, k, cfg)
    if k == 1 or previous_errors is None:
        return plain
    start = cfg.exchange_time(k - 1)
    shape = refeed_shape(start, cfg.exchange_time(k))
    return [ext.with_correction(err, shape) for ext, err in zip(plain, previous_errors)]


def exchange_power_negotiated(
    connections: Sequence[Connection],
    histories: Sequence[SampleHistory],
    power_histories: Sequence[SampleHistory],
    k: int,
    cfg: MasterConfig,
) -> tuple[list[Extrapolant], list[Optional[Extrapolant]]]:
    """Plain extrapolants for all inputs plus the agreed-power extrapolants.

    ``power_histories[c]`` holds the negotiated power (and its negotiated rate
    as derivative) of power-coupled connection ``c``; it is None for the
    others. The replaced components are produced by the input providers
    during integration.
    """
    plain = exchange_plain(connections, histories, k, cfg)
    targets = [
        None if ph is None else _extrapolate(ph, k, cfg.degree, cfg.hermite, cfg.H)
        for ph in power_histories
    ]
    return plain, targets


# -- input providers ---------------------------------------------------------

class _InputProvider:
    """Assembles a block's input vector from per-connection extrapolants."""

    def __init__(self, dim: int, parts: list[tuple[tuple[int, ...], Extrapolant]]):
        self.dim = dim
        self.parts = [(np.array(idx, dtype=int), ext) for idx, ext in parts]
        # kinks of the refeed hats; the integrator stops there
        self.kinks = sorted({ext.correction.shape.mid for _, ext in parts
                             if ext.correction is not None})

    def base(self, t: float) -> np.ndarray:
        u = np.zeros(self.dim)
        for idx, ext in self.parts:
            u[idx] = ext(t)
        return u

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.base(t)

    evaluate = __call__

    def on_step(self, t: float, x: np.ndarray) -> bool:
        return False

    def finish(self, t: float) -> None:
        pass


_NORMAL, _FREEZE, _STOP = "normal", "freeze", "stop"


class _PowerInputProvider(_InputProvider):
    """Inputs with one component reconstructed from the agreed power.

    Writing the port power as ``P = r + d * u_k``, the regular case solves
    ``u_k = (p - r) / d`` for the agreed power ``p``. The inverse is singular
    where ``d`` vanishes, and there the agreed power (an extrapolant) rarely
    vanishes at exactly the same instant. The provider runs a small state
    machine whose transitions happen only at accepted integrator steps, so the
    right-hand side is smooth within every step:

    ``normal``
        ``u_k = (p - r) / (sigma * max(|d|, eps))`` with ``sigma`` the sign of
        ``d`` on entry; the exact inverse while ``|d| >= eps``.
    ``freeze``
        entered when ``|d| < eps``: ``u_k`` keeps the value it had on entry
        (after an exchange: the partner's exchanged value), which carries the
        state through the zero of ``d`` in the limit sense.
    ``stop``
        past the zero, while the exact inverse would reverse the direction of
        travel: ``u_k = 0``, so no power passes through the replaced
        component until the agreed power turns consistent.

    Time spent outside ``normal``, and normal steps in which ``|d| < eps`` was
    met, are logged as spans: only there does the realized port power differ
    from the agreed one.
    """

    def __init__(self, dim, parts, block: SubsystemBlock, k: int, target: Extrapolant,
                 eps: float, t0: float, x0: np.ndarray, exchanged: float):
        super().__init__(dim, parts)
        self.block = block
        self.k = k
        self.target = target
        self.eps = eps
        self.t_prev = t0
        self.spans: list[tuple[float, float]] = []
        self.guard_hit = False
        self.direction = _sign(exchanged)
        r, d = _affine_parts(block.power_map, x0, self.base(t0), k)
        if abs(d) >= eps:
            self.mode, self.param = _NORMAL, _sign(d)
            self.span_start = None
        else:
            self.mode, self.param = _FREEZE, float(exchanged)
            self.span_start = t0
        self.log = [(t0, self.mode, self.param)]

    def power_target(self, t: float) -> float:
        return float(self.target(t)[0])

    def _value(self, t, x, mode, param):
        u = self.base(t)
        r, d = _affine_parts(self.block.power_map, x, u, self.k)
        p = self.power_target(t)
        if mode == _NORMAL:
            ad = abs(d)
            if ad >= self.eps and _sign(d) == param and self.block.power_inverse is not None:
                val = float(self.block.power_inverse(p, x, u))
            elif ad >= self.eps and _sign(d) == param:
                val = (p - r) / d
            else:
                val = (p - r) / (param * max(ad, self.eps))
        elif mode == _FREEZE:
            val = param
        else:
            val = 0.0
        u[self.k] = val
        return u, p, r, d

    def __call__(self, t, x):
        u, _, _, d = self._value(t, x, self.mode, self.param)
        if abs(d) < self.eps:
            self.guard_hit = True
        return u

    def evaluate(self, t, x):
        """Input as it was used during integration at time ``t``."""
        i = 0
        while i + 1 < len(self.log) and self.log[i + 1][0] <= t:
            i += 1
        _, mode, param = self.log[i]
        return self._value(t, x, mode, param)[0]

    def _switch(self, t, mode, param):
        if mode == _NORMAL and self.span_start is not None:
            self.spans.append((self.span_start, t))
            self.span_start = None
        elif mode != _NORMAL and self.span_start is None:
            self.span_start = self.t_prev
        self.mode, self.param = mode, param
        self.log.append((t, mode, param))

    def on_step(self, t, x):
        u, p, r, d = self._value(t, x, self.mode, self.param)
        guarded, self.guard_hit = self.guard_hit, False
        inside = abs(d) < self.eps
        consistent = not inside and (p - r) / d * self.direction > 0
        old = (self.mode, self.param)
        if self.mode == _NORMAL:
            if inside:
                self._switch(t, _FREEZE, float(u[self.k]))
            elif _sign(d) != self.param:
                # the zero of d was stepped over
                if consistent:
                    self.spans.append((self.t_prev, t))
                    self._switch(t, _NORMAL, _sign(d))
                else:
                    self._switch(t, _STOP, 0.0)
            else:
                if u[self.k] != 0:
                    self.direction = _sign(u[self.k])
                if guarded:
                    self.spans.append((self.t_prev, t))
        elif self.mode == _FREEZE:
            if not inside:
                if self.param != 0:
                    self.direction = _sign(self.param)
                if (p - r) / d * self.direction > 0:
                    self._switch(t, _NORMAL, _sign(d))
                else:
                    self._switch(t, _STOP, 0.0)
        elif inside:
            self._switch(t, _FREEZE, 0.0)
        elif consistent:
            self._switch(t, _NORMAL, _sign(d))
        self.t_prev = t
        return (self.mode, self.param) != old

    def finish(self, t):
        if self.span_start is not None:
            self.spans.append((self.span_start, t))
            self.span_start = None


# -- trace ---------------------------------------------------------------------

@dataclass
class SimulationTrace:
    """Everything recorded by :func:`run_master`.

    Sampled quantities live on the uniform output grid ``sample_times``
    (``samples_per_interval`` points per exchange interval plus ``t_end``).
    Per-exchange quantities have one row per exchange time, per-interval
    quantities one row per interval.

    Attributes
    ----------
    states : ndarray, shape (n_samples, n)
        Global state, blocks concatenated in order.
    energies : ndarray or None
        Energy at the sample times when an energy functional was given.
    phat_samples : ndarray, shape (n_samples, m)
        Agreed-power extrapolant into the target of each power-coupled
        connection, evaluated on the interval containing the sample time.
    dE_samples : ndarray, shape (n_samples, p)
        Balance error being refed on the interval containing the sample time
        (balance-corrected scheme only; ``p`` is the number of exchanged
        components).
    balance_errors : ndarray, shape (n_intervals, p)
        Integral of exchanged signal minus its uncorrected extrapolant, per
        interval and component, for every scheme.
    refed : ndarray, shape (n_intervals, p)
        Correction amount added on each interval.
    phat, phat_rate, raw_power : ndarray, shape (n_intervals + 1, m)
        Agreed power, agreed power rate and the target's own power view at
        the exchange times.
    spans : list of Span
    """

    config: MasterConfig
    block_offsets: np.ndarray
    exchange_times: np.ndarray
    sample_times: np.ndarray
    states: np.ndarray
    energies: Optional[np.ndarray]
    phat_samples: np.ndarray
    dE_samples: np.ndarray
    balance_errors: np.ndarray
    refed: np.ndarray
    phat: np.ndarray
    phat_rate: np.ndarray
    raw_power: np.ndarray
    spans: list[Span]
    power_connections: list[int]
    dense: list[list[DenseSolution]] = field(repr=False)
    inputs: list[list[_InputProvider]] = field(repr=False)
    blocks: list[SubsystemBlock] = field(repr=False)
    connections: list[Connection] = field(repr=False)
    energy: Optional[Callable[[np.ndarray], float]] = field(default=None, repr=False)

    @property
    def n_intervals(self) -> int:
        return len(self.exchange_times) - 1

    def interval_of(self, t: float) -> int:
        """0-based interval index containing ``t`` (last interval for ``t_end``)."""
        k = int(np.searchsorted(self.exchange_times, t, side="right")) - 1
        return min(max(k, 0), self.n_intervals - 1)

    def block_state(self, i: int, t: float) -> np.ndarray:
        return self.dense[i][self.interval_of(t)](t)

    def state(self, t: float) -> np.ndarray:
        return np.concatenate([self.block_state(i, t) for i in range(len(self.blocks))])

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1].copy()

    def block_input(self, i: int, t: float) -> np.ndarray:
        k = self.interval_of(t)
        return self.inputs[i][k].evaluate(t, self.dense[i][k](t))

    def power_residual(self, c: int, t: float) -> float:
        """``|P(x, u) - Ext(P^)|`` of power-coupled connection ``c`` at ``t``."""
        conn = self.connections[c]
        k = self.interval_of(t)
        prov = self.inputs[conn.target][k]
        x = self.dense[conn.target][k](t)
        u = prov.evaluate(t, x)
        return abs(float(self.blocks[conn.target].power_map(x, u)) - prov.power_target(t))

    def in_span(self, t: float, block: Optional[int] = None) -> bool:
        return any(s.start <= t <= s.end for s in self.spans if block is None or s.block == block)


# -- master ----------------------------------------------------------------------

def _validate(blocks, connections, x0, cfg):
    n = sum(b.state_dim for b in blocks)
    if x0.shape != (n,):
        raise CouplingError(f"x0 has shape {x0.shape}, expected ({n},)")
    taken = [set() for _ in blocks]
    for c in connections:
        for i, name in ((c.source, "source"), (c.target, "target")):
            if not 0 <= i < len(blocks):
                raise CouplingError(f"connection {name} index {i} out of range")
        src, tgt = blocks[c.source], blocks[c.target]
        if any(not 0 <= o < src.output_dim for o in c.source_outputs):
            raise CouplingError(f"source output index out of range for block {src.name!r}")
        if c.source_derivatives is not None and any(
                d is not None and not 0 <= d < src.output_dim for d in c.source_derivatives):
            raise CouplingError(f"derivative output index out of range for block {src.name!r}")
        for j in c.target_inputs:
            if not 0 <= j < tgt.input_dim:
                raise CouplingError(f"target input index out of range for block {tgt.name!r}")
            if j in taken[c.target]:
                raise CouplingError(f"input {j} of block {tgt.name!r} is fed twice")
            taken[c.target].add(j)
    if cfg.scheme is Scheme.POWER_NEGOTIATED:
        incoming = [0] * len(blocks)
        for c in connections:
            if not c.power_coupled:
                continue
            incoming[c.target] += 1
            if _partner(connections, c) is None:
                raise CouplingError(
                    f"power-coupled connection {c.source}->{c.target} has no reverse power connection")
            for i in (c.source, c.target):
                if blocks[i].power_map is None:
                    raise CouplingError(f"block {blocks[i].name!r} lacks a power map")
                if cfg.hermite and cfg.degree == 1 and blocks[i].power_rate_map is None:
                    raise CouplingError(f"block {blocks[i].name!r} lacks a power rate map")
        if any(n > 1 for n in incoming):
            raise CouplingError("at most one power-coupled input connection per block is supported")


def _partner(connections, c) -> Optional[int]:
    for j, o in enumerate(connections):
        if o.power_coupled and o.source == c.target and o.target == c.source:
            return j
    return None


class _Master:
    def __init__(self, blocks, connections, x0, cfg, energy):
        self.blocks = list(blocks)
        self.conns = list(connections)
        self.cfg = cfg
        self.energy = energy
        self.offsets = np.cumsum([0] + [b.state_dim for b in self.blocks])
        self.x = [x0[self.offsets[i]:self.offsets[i + 1]].copy() for i in range(len(self.blocks))]
        self.hist = [_History(c.width) for c in self.conns]
        pn = cfg.scheme is Scheme.POWER_NEGOTIATED
        self.power_idx = [i for i, c in enumerate(self.conns) if c.power_coupled and pn]
        self.partner = {i: _partner(self.conns, self.conns[i]) for i in self.power_idx}
        self.phist = {i: _History(1) for i in self.power_idx}
        self.comp_offsets = np.cumsum([0] + [c.width for c in self.conns])

    # exchange ---------------------------------------------------------------

    def _assemble(self, outputs):
        us = [np.zeros(b.input_dim) for b in self.blocks]
        for c in self.conns:
            us[c.target][list(c.target_inputs)] = outputs[c.source][list(c.source_outputs)]
        return us

    def exchange(self, t, k):
        """Outputs and consistent inputs at exchange time ``t``.

        Direct feedthrough is resolved by repeated output sweeps starting from
        zero inputs; the fixed point is reached after at most one sweep per
        block for acyclic feedthrough.
        """
        us = [np.zeros(b.input_dim) for b in self.blocks]
        for _ in range(2 * len(self.blocks) + 1):
            ys = [np.asarray(b.output_map(t, x, u), dtype=float)
                  for b, x, u in zip(self.blocks, self.x, us)]
            new = self._assemble(ys)
            if all(np.array_equal(a, b) for a, b in zip(new, us)):
                return ys, us
            us = new
        raise CouplingError("outputs do not settle at the exchange time (algebraic loop)", k)

    def record_samples(self, t, ys, us):
        for c, h in zip(self.conns, self.hist):
            y = ys[c.source]
            val = y[list(c.source_outputs)]
            if c.source_derivatives is None:
                der = np.full(c.width, np.nan)
            else:
                der = np.array([np.nan if d is None else y[d] for d in c.source_derivatives])
            h.append(t, val, der)

    def negotiate(self, t, us):
        """Agreed power and rate for every power-coupled connection at ``t``."""
        out = {}
        for c in self.power_idx:
            own, other = self.conns[c].target, self.conns[self.partner[c]].target
            p_own = float(self.blocks[own].power_map(self.x[own], us[own]))
            p_other = float(self.blocks[other].power_map(self.x[other], us[other]))
            if self.blocks[own].power_rate_map is not None and self.blocks[other].power_rate_map is not None:
                r_own = float(self.blocks[own].power_rate_map(self.x[own], us[own]))
                r_other = float(self.blocks[other].power_rate_map(self.x[other], us[other]))
                rate = negotiate_power(r_own, r_other)
            else:
                rate = math.nan
            out[c] = (negotiate_power(p_own, p_other), rate, p_own)
        return out

    # integration ------------------------------------------------------------

    def _advance(self, i, provider, a, b, first_step, k):
        block = self.blocks[i]

        def rhs(t, x):
            return block.rhs(t, x, provider(t, x))

        edges = [a] + [t for t in provider.kinks if a < t < b] + [b]
        x, pieces = self.x[i], []
        try:
            for t0, t1 in zip(edges[:-1], edges[1:]):
                x, dense = integrate(rhs, x, t0, t1, self.cfg.integrator,
                                     on_step=provider.on_step, first_step=first_step)
                first_step = dense.next_step
                pieces.append(dense)
        except IntegrationError as exc:
            raise CouplingError(f"block {block.name!r}: {exc}", k) from exc
        provider.finish(b)
        return x, join_dense(pieces)

    def run(self) -> SimulationTrace:
        cfg = self.cfg
        n_int = cfg.n_intervals
        nb = len(self.blocks)
        p = int(self.comp_offsets[-1])
        m = len(self.power_idx)
        N = cfg.samples_per_interval
        scheme = cfg.scheme

        T = np.array([cfg.exchange_time(k) for k in range(n_int + 1)])
        n_samples = n_int * N + 1
        sample_times = np.empty(n_samples)
        states = np.empty((n_samples, int(self.offsets[-1])))
        phat_samples = np.zeros((n_samples, m))
        dE_samples = np.zeros((n_samples, p if scheme is Scheme.BALANCE_CORRECTED else 0))
        balance_errors = np.zeros((n_int, p))
        refed = np.zeros((n_int, p))
        phat = np.zeros((n_int + 1, m))
        phat_rate = np.zeros((n_int + 1, m))
        raw_power = np.zeros((n_int + 1, m))
        dense_log = [[] for _ in range(nb)]
        input_log = [[] for _ in range(nb)]
        spans: list[Span] = []
        steps: list[Optional[float]] = [None] * nb
        prev_err = None

        ys, us = self.exchange(T[0], 0)
        self.record_samples(T[0], ys, us)
        if scheme is Scheme.POWER_NEGOTIATED:
            self._store_negotiation(0, T[0], us, phat, phat_rate, raw_power)

        pool = ThreadPoolExecutor(max_workers=nb) if cfg.concurrent and nb > 1 else None
        try:
            for k in range(1, n_int + 1):
                a, b = T[k - 1], T[k]
                tails = [h.tail() for h in self.hist]
                if scheme is Scheme.BALANCE_CORRECTED:
                    exts = exchange_balance_corrected(self.conns, tails, k, cfg, prev_err)
                else:
                    exts = exchange_plain(self.conns, tails, k, cfg)
                targets = [None] * len(self.conns)
                if scheme is Scheme.POWER_NEGOTIATED:
                    ptails = [self.phist[c].tail() if c in self.phist else None
                              for c in range(len(self.conns))]
                    _, targets = exchange_power_negotiated(self.conns, tails, ptails, k, cfg)
                providers = [self._provider(i, exts, targets, a, us) for i in range(nb)]

                jobs = [(i, providers[i], a, b, steps[i], k) for i in range(nb)]
                if pool is not None:
                    results = list(pool.map(lambda j: self._advance(*j), jobs))
                else:
                    results = [self._advance(*j) for j in jobs]

                denses = [d for _, d in results]
                for i in range(nb):
                    dense_log[i].append(denses[i])
                    input_log[i].append(providers[i])
                    steps[i] = denses[i].next_step
                    for s0, s1 in getattr(providers[i], "spans", ()):
                        spans.append(Span(i, float(s0), float(s1)))

                # sample the interval before the states move on
                rows = slice((k - 1) * N, k * N)
                ts = a + np.arange(N) * ((b - a) / N)
                sample_times[rows] = ts
                for j, t in enumerate(ts):
                    states[(k - 1) * N + j] = np.concatenate([d(t) for d in denses])
                for col, c in enumerate(self.power_idx):
                    prov = providers[self.conns[c].target]
                    phat_samples[rows, col] = [prov.power_target(t) for t in ts]

                errs = self._balance_errors(exts, denses, providers, a, b)
                balance_errors[k - 1] = np.concatenate(errs) if errs else np.zeros(0)
                if scheme is Scheme.BALANCE_CORRECTED:
                    if prev_err:
                        refed[k - 1] = np.concatenate(prev_err)
                    dE_samples[rows] = refed[k - 1]
                    prev_err = errs

                self.x = [r[0] for r in results]
                ys, us = self.exchange(b, k)
                self.record_samples(b, ys, us)
                if scheme is Scheme.POWER_NEGOTIATED:
                    self._store_negotiation(k, b, us, phat, phat_rate, raw_power)
        finally:
            if pool is not None:
                pool.shutdown()

        sample_times[-1] = T[-1]
        states[-1] = np.concatenate(self.x)
        if m:
            phat_samples[-1] = phat[-1]
        if dE_samples.shape[1]:
            dE_samples[-1] = balance_errors[-1]
        energies = None
        if self.energy is not None:
            energies = np.array([float(self.energy(s)) for s in states])

        return SimulationTrace(
            config=cfg,
            block_offsets=self.offsets,
            exchange_times=T,
            sample_times=sample_times,
            states=states,
            energies=energies,
            phat_samples=phat_samples,
            dE_samples=dE_samples,
            balance_errors=balance_errors,
            refed=refed,
            phat=phat,
            phat_rate=phat_rate,
            raw_power=raw_power,
            spans=spans,
            power_connections=list(self.power_idx),
            dense=dense_log,
            inputs=input_log,
            blocks=self.blocks,
            connections=self.conns,
            energy=self.energy,
        )

    def _store_negotiation(self, k, t, us, phat, phat_rate, raw_power):
        neg = self.negotiate(t, us)
        for col, c in enumerate(self.power_idx):
            value, rate, own = neg[c]
            phat[k, col], phat_rate[k, col], raw_power[k, col] = value, rate, own
            self.phist[c].append(t, [value], [rate])

    def _provider(self, i, exts, targets, t0, us):
        block = self.blocks[i]
        parts = [(c.target_inputs, exts[j]) for j, c in enumerate(self.conns) if c.target == i]
        for j, c in enumerate(self.conns):
            if c.target == i and targets[j] is not None:
                k = c.replaced_component
                return _PowerInputProvider(
                    block.input_dim, parts, block, k, targets[j],
                    self.cfg.inversion_epsilon, t0, self.x[i], us[i][k])
        return _InputProvider(block.input_dim, parts)

    def _balance_errors(self, exts, denses, providers, a, b):
        mid = 0.5 * (a + b)
        errs = []
        for c, ext in zip(self.conns, exts):
            src = self.blocks[c.source]
            dense, prov = denses[c.source], providers[c.source]
            idx = list(c.source_outputs)

            def actual(t, src=src, dense=dense, prov=prov, idx=idx):
                x = dense(t)
                return np.asarray(src.output_map(t, x, prov.evaluate(t, x)), dtype=float)[idx]

            bps = np.append(dense.breakpoints, mid)
            errs.append(balance_error(actual, ext.without_correction(), a, b, bps))
        return errs


def run_master(
    blocks: Sequence[SubsystemBlock],
    connections: Sequence[Connection],
    x0,
    cfg: MasterConfig,
    energy: Optional[Callable[[np.ndarray], float]] = None,
) -> SimulationTrace:
    """Run one co-simulation from ``cfg.t0`` to ``cfg.t_end``.

    Parameters
    ----------
    blocks : sequence of SubsystemBlock
    connections : sequence of Connection
    x0 : array_like
        Global initial state, block states concatenated in order.
    cfg : MasterConfig
    energy : callable, optional
        Energy functional of the global state, sampled into the trace.

    Raises
    ------
    CouplingError
        Inconsistent wiring, or failure inside an interval (the error carries
        the interval index).
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    _validate(blocks, connections, x0, cfg)
    return _Master(blocks, connections, x0, cfg, energy).run()
