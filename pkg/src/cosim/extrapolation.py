"""Input reconstruction on one exchange interval.

Between exchange times a subsystem does not see its partners; each input is
replaced by a polynomial extrapolant built from the samples exchanged so far.
The balance-correction scheme additionally refeeds the integral error of the
previous interval through a unit-integral hat function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "SampleHistory",
    "HatShape",
    "Correction",
    "Extrapolant",
    "build_constant",
    "build_linear",
    "build_hermite_linear",
    "refeed_shape",
    "balance_error",
    "gauss_legendre",
]

MAX_DEGREE = 1


@dataclass(frozen=True)
class SampleHistory:
    """Exchanged samples of one input vector, oldest first."""

    times: np.ndarray
    values: np.ndarray
    derivatives: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(len(times), -1) if len(times) else values.reshape(0, 0)
        if len(values) != len(times):
            raise ValueError("one value vector per sample time required")
        if np.any(np.diff(times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if self.derivatives is not None:
            der = np.asarray(self.derivatives, dtype=float).reshape(values.shape)
            object.__setattr__(self, "derivatives", der)

    def __len__(self):
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class HatShape:
    """Symmetric triangle on ``[start, end]`` with unit integral.

    Zero at both ends, peak ``2/width`` at the midpoint.
    """

    start: float
    end: float

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError("hat support must have positive width")

    @property
    def width(self) -> float:
        return self.end - self.start

    @property
    def mid(self) -> float:
        return 0.5 * (self.start + self.end)

    @property
    def peak(self) -> float:
        return 2.0 / self.width

    def __call__(self, t):
        half = 0.5 * self.width
        return self.peak * np.maximum(0.0, 1.0 - np.abs(np.asarray(t, dtype=float) - self.mid) / half)

    def _antiderivative(self, t: float) -> float:
        # integral from start to t
        t = min(max(t, self.start), self.end)
        half = 0.5 * self.width
        if t <= self.mid:
            s = t - self.start
            return 0.5 * self.peak * s * s / half
        s = self.end - t
        return 1.0 - 0.5 * self.peak * s * s / half

    def integral(self, a: float, b: float) -> float:
        return self._antiderivative(b) - self._antiderivative(a)


@dataclass(frozen=True)
class Correction:
    amount: np.ndarray
    shape: HatShape


@dataclass(frozen=True)
class Extrapolant:
    """Polynomial in ``t - anchor`` valid on ``[anchor, anchor + width)``.

    ``coeffs[p]`` is the vector coefficient of ``(t - anchor)**p``. An optional
    correction adds ``amount * shape(t)``.
    """

    anchor: float
    width: float
    coeffs: np.ndarray
    correction: Optional[Correction] = None

    def __post_init__(self):
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if not 1 <= len(coeffs) <= MAX_DEGREE + 1:
            raise ValueError(f"extrapolation degree must be in 0..{MAX_DEGREE}")
        if not self.width > 0:
            raise ValueError("extrapolant width must be positive")
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]

    @property
    def end(self) -> float:
        return self.anchor + self.width

    def __call__(self, t: float) -> np.ndarray:
        c = self.coeffs
        out = c[0] if len(c) == 1 else c[0] + (t - self.anchor) * c[1]
        if self.correction is not None:
            out = out + self.correction.amount * float(self.correction.shape(t))
        return out

    def derivative(self, t: float) -> np.ndarray:
        """Time derivative of the polynomial part."""
        if self.degree == 0:
            return np.zeros(self.dim)
        return self.coeffs[1].copy()

    def integral(self, a: float, b: float) -> np.ndarray:
        """Exact integral over ``[a, b]``, correction included."""
        c = self.coeffs
        out = c[0] * (b - a)
        if len(c) > 1:
            out = out + c[1] * 0.5 * ((b - self.anchor) ** 2 - (a - self.anchor) ** 2)
        if self.correction is not None:
            out = out + self.correction.amount * self.correction.shape.integral(a, b)
        return out

    def with_correction(self, amount, shape: "HatShape") -> "Extrapolant":
        amount = np.asarray(amount, dtype=float).reshape(self.dim)
        return Extrapolant(self.anchor, self.width, self.coeffs, Correction(amount, shape))

    def without_correction(self) -> "Extrapolant":
        if self.correction is None:
            return self
        return Extrapolant(self.anchor, self.width, self.coeffs)

    def restrict(self, indices: Sequence[int]) -> "Extrapolant":
        """Extrapolant of a subset of the components."""
        idx = list(indices)
        corr = None
        if self.correction is not None:
            corr = Correction(self.correction.amount[idx], self.correction.shape)
        return Extrapolant(self.anchor, self.width, self.coeffs[:, idx], corr)


def build_constant(hist: SampleHistory, width: float = 1.0) -> Extrapolant:
    """Hold the newest sample."""
    if len(hist) == 0:
        raise ValueError("cannot extrapolate from an empty history")
    return Extrapolant(float(hist.times[-1]), width, hist.values[-1:].copy())


def build_linear(hist: SampleHistory, width: float = 1.0) -> Extrapolant:
    """Secant through the two newest samples, continued forward."""
    if len(hist) < 2:
        raise ValueError("linear extrapolation needs two samples")
    t0, t1 = hist.times[-2], hist.times[-1]
    if t1 == t0:
        raise ValueError("duplicate sample times")
    y0, y1 = hist.values[-2], hist.values[-1]
    slope = (y1 - y0) / (t1 - t0)
    return Extrapolant(float(t1), width, np.vstack([y1, slope]))


def build_hermite_linear(value, derivative, anchor: float, width: float = 1.0) -> Extrapolant:
    """First-order Taylor polynomial from an exchanged value and its derivative."""
    value = np.atleast_1d(np.asarray(value, dtype=float))
    derivative = np.atleast_1d(np.asarray(derivative, dtype=float))
    if value.shape != derivative.shape:
        raise ValueError("value and derivative dimensions differ")
    return Extrapolant(float(anchor), width, np.vstack([value, derivative]))


def refeed_shape(start: float, end: float) -> HatShape:
    return HatShape(float(start), float(end))


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1]."""
    if n not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GL_CACHE[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[n]


def balance_error(
    actual: Callable[[float], np.ndarray],
    ext: Extrapolant,
    t0: float,
    t1: float,
    breakpoints: Optional[Sequence[float]] = None,
    nodes: int = 8,
) -> np.ndarray:
    """Integral of ``actual - ext`` over ``[t0, t1]``.

    Composite Gauss-Legendre with ``nodes`` points per panel. Panels are
    delimited by ``breakpoints`` (typically the sender's integrator steps, on
    which its dense output is polynomial) and by the kink of the correction
    hat, so the rule is exact for the extrapolant and for polynomial dense
    output of degree < 2*nodes.
    """
    cuts = {float(t0), float(t1)}
    if breakpoints is not None:
        cuts.update(float(b) for b in breakpoints if t0 < b < t1)
    if ext.correction is not None:
        sh = ext.correction.shape
        cuts.update(c for c in (sh.start, sh.mid, sh.end) if t0 < c < t1)
    edges = sorted(cuts)
    x, w = gauss_legendre(nodes)
    total = np.zeros(ext.dim)
    for a, b in zip(edges[:-1], edges[1:]):
        h = b - a
        for xi, wi in zip(x, w):
            t = a + h * xi
            total += (h * wi) * (np.asarray(actual(t), dtype=float) - ext(t))
    return total
