"""Independent reference computations used by the tests.

Nothing here calls into the package; each helper recomputes a quantity from
its definition with plain loops.
"""

import math

import numpy as np


def seeded_states(n, count=100, seed=20240601):
    """``count`` states drawn uniformly from ``[-2, 2]^n``."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-2.0, 2.0, size=(count, n))


def production_by_loops(M, grad, partition):
    """``P_kl = sum_{i in I_k} sum_{j in I_l} g_i * (-M_ij) * g_j``."""
    P = np.zeros((len(partition), len(partition)))
    for k, Ik in enumerate(partition):
        for l, Il in enumerate(partition):
            acc = 0.0
            for i in Ik:
                for j in Il:
                    acc += grad[i] * (-M[i][j]) * grad[j]
            P[k, l] = acc
    return P


def monotonicity_signs(flow, n, pairs=100, seed=7, tol=1e-12):
    """Signs of ``<x - y, f(x) - f(y)>`` over seeded random pairs.

    Returns the set of observed signs among ``{-1, 0, 1}``; products whose
    magnitude is below ``tol * |x - y|^2`` count as zero.
    """
    rng = np.random.default_rng(seed)
    signs = set()
    for _ in range(pairs):
        x = rng.uniform(-2, 2, n)
        y = rng.uniform(-2, 2, n)
        d = x - y
        q = float(np.dot(d, flow(x) - flow(y)))
        if abs(q) <= tol * float(np.dot(d, d)):
            signs.add(0)
        else:
            signs.add(1 if q > 0 else -1)
    return signs


def classify_from_signs(signs):
    """Map observed monotonicity signs to a flow classification.

    A flow ``f = -M grad P`` that never increases ``<x - y, f(x) - f(y)>``
    above zero contracts distances: dissipative. Identically zero products
    mean distances are preserved: conservative.
    """
    if signs == {0}:
        return "conservative"
    if 1 not in signs:
        return "dissipative"
    return "indefinite"


def euler_growth_slope(Hs, t_end):
    """Log-log slope of the endpoint error of ``(1 + iH)^(t_end/H)`` vs ``exp(i t_end)``.

    Co-simulating the unit oscillator with constant extrapolation in both
    directions advances the complex amplitude ``s + i v`` by the explicit
    Euler map ``z -> (1 - iH) z`` at every exchange (up to integrator error),
    so this closed form is the error the plain scheme must reproduce.
    """
    errs = []
    for H in Hs:
        n = round(t_end / H)
        z = (1 - 1j * H) ** n
        errs.append(abs(z - complex(math.cos(t_end), -math.sin(t_end))))
    return float(np.polyfit(np.log(Hs), np.log(errs), 1)[0]), np.array(errs)
