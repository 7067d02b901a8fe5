"""One-step ODE integrators with dense output.

Subsystems are advanced between exchange times with one of three one-step
methods. Multistep methods are deliberately absent: every exchange time is a
restart, and a multistep starter of unknown order would pollute the observed
coupling order.

* ``rk54``         Dormand-Prince 5(4) with PI step-size control and the
                   4th order continuous extension.
* ``rk4``          classical fixed-step Runge-Kutta, cubic Hermite dense output.
* ``trapezoidal``  implicit trapezoidal rule (A-stable), damped Newton with a
                   finite-difference Jacobian, cubic Hermite dense output.
"""

from __future__ import annotations

import enum
import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Method",
    "IntegratorConfig",
    "DenseSolution",
    "IntegrationError",
    "StepSizeUnderflow",
    "join_dense",
    "integrate",
    "eval_dense",
]

Rhs = Callable[[float, np.ndarray], np.ndarray]
StepCallback = Callable[[float, np.ndarray], bool]


class Method(str, enum.Enum):
    RK54 = "rk54"
    RK4 = "rk4"
    TRAPEZOIDAL = "trapezoidal"


class IntegrationError(RuntimeError):
    """Integration could not reach the requested end time.

    ``t_last`` is the last time the integrator reached with an accepted step.
    """

    def __init__(self, message: str, t_last: float):
        super().__init__(f"{message} (last reached t={t_last!r})")
        self.t_last = t_last


class StepSizeUnderflow(IntegrationError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    """Integrator settings for one subsystem.

    ``max_step`` is the fixed step for ``rk4`` and ``trapezoidal`` (shortened
    so that the interval is divided evenly). ``initial_step=None`` lets the
    adaptive method pick its first step itself.
    """

    method: Method = Method.RK54
    abs_tol: float = 1e-12
    rel_tol: float = 1e-12
    max_step: float = math.inf
    initial_step: Optional[float] = None
    max_steps: int = 1_000_000

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.abs_tol < 0 or self.rel_tol < 0:
            raise ValueError("tolerances must be non-negative")
        if self.method is Method.RK54 and not (self.abs_tol > 0 or self.rel_tol > 0):
            raise ValueError("rk54 needs abs_tol > 0 or rel_tol > 0")
        if not self.max_step > 0:
            raise ValueError("max_step must be positive")
        if self.initial_step is not None:
            if not self.initial_step > 0:
                raise ValueError("initial_step must be positive")
            if self.initial_step > self.max_step:
                raise ValueError("initial_step must not exceed max_step")
        if self.method is not Method.RK54 and math.isinf(self.max_step):
            raise ValueError(f"{self.method.value} is fixed-step and needs a finite max_step")


class DenseSolution:
    """Piecewise polynomial state interpolant over ``[t0, t1]``.

    Each step ``[ts[i], ts[i+1]]`` is stored in the nested form used by
    Hairer's DOPRI5 continuous extension::

        y(t0 + th*h) = r1 + th*(r2 + (1-th)*(r3 + th*(r4 + (1-th)*r5)))

    With ``r5 = 0`` this is the cubic Hermite interpolant, which is what the
    fixed-step methods store.
    """

    __slots__ = ("ts", "ys", "coeffs", "order", "next_step")

    def __init__(self, ts, ys, coeffs, order: int):
        self.ts = np.asarray(ts, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.order = order
        self.next_step = None

    @property
    def t0(self) -> float:
        return float(self.ts[0])

    @property
    def t1(self) -> float:
        return float(self.ts[-1])

    @property
    def breakpoints(self) -> np.ndarray:
        return self.ts

    def __call__(self, t: float) -> np.ndarray:
        return eval_dense(self, t)


def join_dense(parts: "list[DenseSolution]") -> DenseSolution:
    """Concatenate dense solutions on adjacent intervals into one."""
    if len(parts) == 1:
        return parts[0]
    for left, right in zip(parts[:-1], parts[1:]):
        if left.t1 != right.t0:
            raise ValueError("dense pieces are not adjacent")
    ts = np.concatenate([parts[0].ts] + [p.ts[1:] for p in parts[1:]])
    ys = np.concatenate([parts[0].ys] + [p.ys[1:] for p in parts[1:]])
    coeffs = np.concatenate([p.coeffs for p in parts])
    dense = DenseSolution(ts, ys, coeffs, min(p.order for p in parts))
    dense.next_step = parts[-1].next_step
    return dense


def eval_dense(dense: DenseSolution, t: float) -> np.ndarray:
    """Evaluate the interpolant at a single time.

    Stored step endpoints are returned exactly. Raises ``ValueError`` outside
    ``[t0, t1]``.
    """
    ts = dense.ts
    if not ts[0] <= t <= ts[-1]:
        raise ValueError(f"t={t!r} outside dense domain [{ts[0]!r}, {ts[-1]!r}]")
    i = bisect_right(ts, t) - 1
    if ts[i] == t:
        return dense.ys[i].copy()
    r1, r2, r3, r4, r5 = dense.coeffs[i]
    th = (t - ts[i]) / (ts[i + 1] - ts[i])
    th1 = 1.0 - th
    return r1 + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5)))


# -- Dormand-Prince 5(4) tableau ---------------------------------------------

_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
# continuous extension (Hairer, dopri5.f)
_D1 = -12715105075 / 11282082432
_D3 = 87487479700 / 32700410799
_D4 = -10690763975 / 1880347072
_D5 = 701980252875 / 199316789632
_D6 = -1453857185 / 822651844
_D7 = 69997945 / 29380423

_SAFETY = 0.9
_FAC_MIN, _FAC_MAX = 0.2, 5.0
_ALPHA = 0.2 - 0.75 * 0.04
_BETA = 0.04


def _err_norm(e, y0, y1, atol, rtol):
    sc = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return math.sqrt(float(np.mean((e / sc) ** 2)))


def _initial_step(rhs, t0, y0, f0, atol, rtol, hmax):
    sc = atol + rtol * np.abs(y0)
    d0 = math.sqrt(float(np.mean((y0 / sc) ** 2)))
    d1 = math.sqrt(float(np.mean((f0 / sc) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, hmax)
    f1 = rhs(t0 + h0, y0 + h0 * f0)
    d2 = math.sqrt(float(np.mean(((f1 - f0) / sc) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, hmax)


def _rk54(rhs, y, t0, t1, cfg, on_step, h):
    atol, rtol = cfg.abs_tol, cfg.rel_tol
    span = t1 - t0
    hmax = min(cfg.max_step, span)
    t = t0
    k1 = rhs(t, y)
    if h is None:
        h = cfg.initial_step
    if h is None:
        h = _initial_step(rhs, t, y, k1, atol, rtol, hmax)
    h = min(h, hmax)

    ts, ys, coeffs = [t], [y], []
    err_old = 1e-4
    rejected = False
    h_next = h
    nsteps = 0
    while t < t1:
        last = t + 1.01 * h >= t1
        if last:
            h = t1 - t
        if h <= 16 * math.ulp(max(abs(t), abs(t1))):
            raise StepSizeUnderflow("step size underflow", t)
        nsteps += 1
        if nsteps > cfg.max_steps:
            raise IntegrationError(f"more than {cfg.max_steps} steps", t)

        k2 = rhs(t + _C2 * h, y + h * (_A21 * k1))
        k3 = rhs(t + _C3 * h, y + h * (_A31 * k1 + _A32 * k2))
        k4 = rhs(t + _C4 * h, y + h * (_A41 * k1 + _A42 * k2 + _A43 * k3))
        k5 = rhs(t + _C5 * h, y + h * (_A51 * k1 + _A52 * k2 + _A53 * k3 + _A54 * k4))
        t_new = t1 if last else t + h
        k6 = rhs(t_new, y + h * (_A61 * k1 + _A62 * k2 + _A63 * k3 + _A64 * k4 + _A65 * k5))
        y_new = y + h * (_B1 * k1 + _B3 * k3 + _B4 * k4 + _B5 * k5 + _B6 * k6)
        k7 = rhs(t_new, y_new)
        e = h * (_E1 * k1 + _E3 * k3 + _E4 * k4 + _E5 * k5 + _E6 * k6 + _E7 * k7)
        err = _err_norm(e, y, y_new, atol, rtol)
        if not math.isfinite(err):
            err = 1e10

        if err <= 1.0:
            r2 = y_new - y
            r3 = h * k1 - r2
            r4 = r2 - h * k7 - r3
            r5 = h * (_D1 * k1 + _D3 * k3 + _D4 * k4 + _D5 * k5 + _D6 * k6 + _D7 * k7)
            coeffs.append((y, r2, r3, r4, r5))
            ts.append(t_new)
            ys.append(y_new)
            fac = _FAC_MAX if err == 0 else _SAFETY * err ** -_ALPHA * err_old ** _BETA
            fac = min(_FAC_MAX, max(_FAC_MIN, fac))
            if rejected:
                fac = min(fac, 1.0)
            err_old = max(err, 1e-4)
            rejected = False
            h_proposed = min(h * fac, cfg.max_step)
            # a truncated final step says little about the natural step size
            if not last or len(ts) == 2:
                h_next = h_proposed
            t, y, k1 = t_new, y_new, k7
            if on_step is not None and on_step(t, y):
                k1 = rhs(t, y)
            h = min(h_proposed, hmax)
        else:
            rejected = True
            h *= max(_FAC_MIN, _SAFETY * err ** -0.2)
    return ts, ys, coeffs, 4, h_next


def _n_fixed_steps(t0, t1, hmax):
    return max(1, math.ceil((t1 - t0) / hmax - 1e-12))


def _hermite(y, y_new, h, f0, f1):
    r2 = y_new - y
    r3 = h * f0 - r2
    r4 = r2 - h * f1 - r3
    return (y, r2, r3, r4, np.zeros_like(y))


def _rk4(rhs, y, t0, t1, cfg, on_step, h):
    n = _n_fixed_steps(t0, t1, cfg.max_step)
    h = (t1 - t0) / n
    ts, ys, coeffs = [t0], [y], []
    t = t0
    f0 = rhs(t, y)
    for i in range(n):
        t_new = t1 if i == n - 1 else t0 + (i + 1) * h
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * f0)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t_new, y + h * k3)
        y_new = y + (h / 6) * (f0 + 2 * k2 + 2 * k3 + k4)
        f1 = rhs(t_new, y_new)
        coeffs.append(_hermite(y, y_new, h, f0, f1))
        ts.append(t_new)
        ys.append(y_new)
        t, y, f0 = t_new, y_new, f1
        if on_step is not None and on_step(t, y):
            f0 = rhs(t, y)
    return ts, ys, coeffs, 3, h


_NEWTON_TOL = 1e-12
_NEWTON_MAXITER = 25


def _fd_jacobian(fun, t, y, f):
    n = y.size
    jac = np.empty((n, n))
    for j in range(n):
        dy = math.sqrt(np.finfo(float).eps) * max(1.0, abs(y[j]))
        yp = y.copy()
        yp[j] += dy
        jac[:, j] = (fun(t, yp) - f) / dy
    return jac


def _trapezoidal_step(rhs, t, y, f0, h):
    """Solve ``z = y + h/2 (f0 + f(t+h, z))`` by damped Newton.

    Returns ``None`` when Newton does not converge.
    """
    t_new = t + h
    z = y + h * f0
    eye = np.eye(y.size)

    def residual(z):
        fz = rhs(t_new, z)
        return z - y - 0.5 * h * (f0 + fz), fz

    g, fz = residual(z)
    for _ in range(_NEWTON_MAXITER):
        jac = eye - 0.5 * h * _fd_jacobian(rhs, t_new, z, fz)
        try:
            dz = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            return None
        gnorm = np.linalg.norm(g)
        lam = 1.0
        while True:
            z_try = z + lam * dz
            g_try, f_try = residual(z_try)
            if np.linalg.norm(g_try) <= (1 - 0.5 * lam * 1e-4) * gnorm or lam < 1e-4:
                break
            lam *= 0.5
        z, g, fz = z_try, g_try, f_try
        if np.linalg.norm(lam * dz) <= _NEWTON_TOL * (1.0 + np.linalg.norm(z)):
            return z, fz
    return None


def _trapezoidal(rhs, y, t0, t1, cfg, on_step, h):
    n = _n_fixed_steps(t0, t1, cfg.max_step)
    h = (t1 - t0) / n
    ts, ys, coeffs = [t0], [y], []
    t = t0
    f0 = rhs(t, y)
    nsteps = 0
    while t < t1:
        if t + 1.01 * h >= t1:
            h = t1 - t
        if h <= 16 * math.ulp(max(abs(t), abs(t1))):
            raise StepSizeUnderflow("Newton failed down to minimal step", t)
        nsteps += 1
        if nsteps > cfg.max_steps:
            raise IntegrationError(f"more than {cfg.max_steps} steps", t)
        out = _trapezoidal_step(rhs, t, y, f0, h)
        if out is None:
            h *= 0.5
            continue
        y_new, f1 = out
        t_new = t1 if t + 1.01 * h >= t1 else t + h
        coeffs.append(_hermite(y, y_new, h, f0, f1))
        ts.append(t_new)
        ys.append(y_new)
        t, y, f0 = t_new, y_new, f1
        if on_step is not None and on_step(t, y):
            f0 = rhs(t, y)
    return ts, ys, coeffs, 3, h


_METHODS = {
    Method.RK54: _rk54,
    Method.RK4: _rk4,
    Method.TRAPEZOIDAL: _trapezoidal,
}


def integrate(
    rhs: Rhs,
    x0,
    t0: float,
    t1: float,
    cfg: IntegratorConfig = IntegratorConfig(),
    *,
    on_step: Optional[StepCallback] = None,
    first_step: Optional[float] = None,
) -> tuple[np.ndarray, DenseSolution]:
    """Advance ``x' = rhs(t, x)`` from ``t0`` to ``t1``.

    Parameters
    ----------
    rhs : callable
        ``rhs(t, x) -> dx/dt``, both 1-D float arrays.
    x0 : array_like
        Initial state.
    t0, t1 : float
        Integration interval, ``t1 > t0``. The dense solution covers it
        exactly.
    cfg : IntegratorConfig
    on_step : callable, optional
        Called as ``on_step(t, x)`` after every accepted step. Returning True
        signals that the right-hand side changed at ``t`` (a discrete switch),
        so the derivative cached from the previous step is recomputed.
    first_step : float, optional
        Overrides ``cfg.initial_step`` for the adaptive method, e.g. to carry
        the step size over from a previous call.

    Returns
    -------
    x_end : ndarray
    dense : DenseSolution
        ``dense.next_step`` holds the step-size proposal for a continuation.

    Raises
    ------
    StepSizeUnderflow
        The step size collapsed below round-off of ``t``.
    """
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0!r}, {t1!r}]")
    y0 = np.array(x0, dtype=float).reshape(-1)
    ts, ys, coeffs, order, h_next = _METHODS[cfg.method](rhs, y0, t0, t1, cfg, on_step, first_step)
    dense = DenseSolution(ts, ys, coeffs, order)
    dense.next_step = h_next
    return ys[-1].copy(), dense

