"""Benchmark systems and their split into co-simulation blocks.

* ``linear-uni`` / ``linear-mutual``: two scalar subsystems ``x' = A x``,
  one component each.
* ``spring-mass``: a spring (state: elongation ``s``) driving a mass
  (state: velocity ``v``). The spring outputs force and force rate, the mass
  outputs velocity and acceleration.
* ``gradient-flow``: ``x' = -M grad P(x)`` split along an index partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .coupling import Connection, SubsystemBlock
from .solvers import IntegratorConfig, integrate

__all__ = [
    "CosimProblem",
    "LinearCoupledModel",
    "SpringMassModel",
    "GradientFlowModel",
    "linear_uni",
    "linear_mutual",
    "spring_mass_analytic",
    "spring_mass_energy",
    "spring_mass_powers",
    "potential_production",
    "mobility_split",
    "dissipativity_check",
    "quadratic_gradient_flow",
    "coupled_oscillators",
    "MODEL_NAMES",
    "build_problem",
]


@dataclass
class CosimProblem:
    """Blocks, wiring and initial state of one benchmark, plus its references.

    ``energy`` and ``reference`` act on the global state (block states
    concatenated in block order); either may be None.
    """

    name: str
    blocks: list[SubsystemBlock]
    connections: list[Connection]
    x0: np.ndarray
    energy: Optional[Callable[[np.ndarray], float]] = None
    reference: Optional[Callable[[float], np.ndarray]] = None
    labels: list[str] = field(default_factory=list)


# -- 2D linear system ----------------------------------------------------------

@dataclass(frozen=True)
class LinearCoupledModel:
    """``x' = A x`` in two scalar components, each its own subsystem."""

    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.shape != (2, 2):
            raise ValueError("A must be 2x2")
        object.__setattr__(self, "A", A)

    @property
    def variant(self) -> str:
        a = self.A
        if a[0, 1] == 0 and a[0, 0] * a[1, 0] * a[1, 1] != 0:
            return "unidirectional"
        if a[0, 0] == 0 and a[1, 1] == 0 and a[0, 1] * a[1, 0] != 0:
            return "mutual"
        return "general"

    def reference(self, x0, t: float) -> np.ndarray:
        return scipy.linalg.expm(self.A * t) @ np.asarray(x0, dtype=float)

    def problem(self, x0=(1.0, 1.0), name: str = "linear") -> CosimProblem:
        A = self.A
        x0 = np.asarray(x0, dtype=float)
        blocks = []
        for i in range(2):
            j = 1 - i

            def rhs(t, x, u, i=i, j=j):
                return np.array([A[i, i] * x[0] + A[i, j] * u[0]])

            def out(t, x, u, i=i, j=j):
                return np.array([x[0], A[i, i] * x[0] + A[i, j] * u[0]])

            blocks.append(SubsystemBlock(f"x{i + 1}", 1, 1, 2, rhs, out))
        conns = [Connection(j, i, (0,), (0,), source_derivatives=(1,))
                 for i, j in ((0, 1), (1, 0)) if A[i, j] != 0]
        energy = None
        if self.variant == "mutual" and A[0, 1] == -A[1, 0]:
            energy = lambda x: 0.5 * float(x @ x)
        return CosimProblem(name, blocks, conns, x0, energy,
                            lambda t: self.reference(x0, t), ["x1", "x2"])


def linear_uni() -> LinearCoupledModel:
    return LinearCoupledModel(np.array([[-1.0, 0.0], [1.0, -1.0]]))


def linear_mutual() -> LinearCoupledModel:
    return LinearCoupledModel(np.array([[0.0, 1.0], [-1.0, 0.0]]))


# -- spring-mass -------------------------------------------------------------------

def spring_mass_analytic(m: float, c: float, x0: float, v0: float, t: float) -> tuple[float, float]:
    """Exact elongation and velocity of the undamped oscillator ``m x'' = -c x``."""
    if not (m > 0 and c > 0):
        raise ValueError("m and c must be positive")
    w = math.sqrt(c / m)
    cw, sw = math.cos(w * t), math.sin(w * t)
    return x0 * cw + v0 / w * sw, -x0 * w * sw + v0 * cw


def spring_mass_energy(m: float, c: float, s: float, v: float) -> float:
    return 0.5 * m * v * v + 0.5 * c * s * s


def spring_mass_powers(m, c, s, v, f, a, fdot=None):
    """Port powers and their rates for spring and mass.

    Returns ``(P_spring, dP_spring, P_mass, dP_mass)``; each is the power
    flowing into that element. ``fdot`` defaults to the spring's force rate
    ``-c v``.
    """
    if fdot is None:
        fdot = -c * v
    return (c * s * v, c * (v * v + s * a), f * v, m * a * a + v * fdot)


@dataclass(frozen=True)
class SpringMassModel:
    """``m v' = -c s - d v``, ``s' = v`` split into spring and mass."""

    m: float = 1.0
    c: float = 1.0
    d: float = 0.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("mass must be positive")
        if not self.c > 0:
            raise ValueError("spring constant must be positive")
        if not self.d >= 0:
            raise ValueError("damping must be non-negative")

    def energy(self, x) -> float:
        return spring_mass_energy(self.m, self.c, x[0], x[1])

    def spring_block(self) -> SubsystemBlock:
        c = self.c
        # inputs: velocity, acceleration
        return SubsystemBlock(
            "spring", 1, 2, 2,
            rhs=lambda t, x, u: np.array([u[0]]),
            output_map=lambda t, x, u: np.array([-c * x[0], -c * u[0]]),
            power_map=lambda x, u: c * x[0] * u[0],
            power_rate_map=lambda x, u: c * (u[0] * u[0] + x[0] * u[1]),
            power_inverse=lambda p, x, u: p / (c * x[0]),
        )

    def mass_block(self) -> SubsystemBlock:
        m, d = self.m, self.d
        # inputs: force, force rate
        return SubsystemBlock(
            "mass", 1, 2, 2,
            rhs=lambda t, x, u: np.array([(u[0] - d * x[0]) / m]),
            output_map=lambda t, x, u: np.array([x[0], (u[0] - d * x[0]) / m]),
            power_map=lambda x, u: u[0] * x[0],
            power_rate_map=lambda x, u: u[1] * x[0] + u[0] * (u[0] - d * x[0]) / m,
            power_inverse=lambda p, x, u: p / x[0],
        )

    def reference(self, x0, v0, t) -> np.ndarray:
        if self.d != 0:
            A = np.array([[0.0, 1.0], [-self.c / self.m, -self.d / self.m]])
            return scipy.linalg.expm(A * t) @ np.array([x0, v0], dtype=float)
        return np.array(spring_mass_analytic(self.m, self.c, x0, v0, t))

    def problem(self, x0: float = 1.0, v0: float = 0.0) -> CosimProblem:
        conns = [
            Connection(1, 0, (0, 1), (0, 1), source_derivatives=(1, None),
                       power_coupled=True, replaced_component=0),
            Connection(0, 1, (0, 1), (0, 1), source_derivatives=(1, None),
                       power_coupled=True, replaced_component=0),
        ]
        return CosimProblem(
            "spring-mass", [self.spring_block(), self.mass_block()], conns,
            np.array([x0, v0], dtype=float), self.energy,
            lambda t: self.reference(x0, v0, t), ["s", "v"])


# -- gradient flows ----------------------------------------------------------------

@dataclass(frozen=True)
class GradientFlowModel:
    """``x' = -M grad P(x)`` with state indices partitioned into subsystems."""

    M: np.ndarray
    potential: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    partition: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        M = np.array(self.M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("mobility matrix must be square")
        part = tuple(tuple(int(i) for i in block) for block in self.partition)
        flat = sorted(i for block in part for i in block)
        if flat != list(range(M.shape[0])):
            raise ValueError("partition must be disjoint and cover all state indices")
        if any(len(b) == 0 for b in part):
            raise ValueError("partition blocks must be non-empty")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "partition", part)

    @property
    def n(self) -> int:
        return self.M.shape[0]

    def rhs(self, x) -> np.ndarray:
        return -self.M @ np.asarray(self.gradient(np.asarray(x, dtype=float)), dtype=float)

    def reference(self, x0, t: float, cfg: Optional[IntegratorConfig] = None) -> np.ndarray:
        """Monolithic solution at ``t`` with the adaptive integrator."""
        if t == 0:
            return np.asarray(x0, dtype=float).copy()
        x_end, _ = integrate(lambda _t, x: self.rhs(x), x0, 0.0, t, cfg or IntegratorConfig())
        return x_end


def potential_production(model: GradientFlowModel, x) -> np.ndarray:
    """Matrix of ``P_kl = <g_k, -M_kl g_l>`` over the partition blocks.

    Row ``k`` is the potential change of subsystem ``k``; the diagonal holds
    internal production, off-diagonal entries the production caused by the
    other subsystem's gradient. The entries sum to ``dP/dt``.
    """
    g = np.asarray(model.gradient(np.asarray(x, dtype=float)), dtype=float)
    part = model.partition
    P = np.empty((len(part), len(part)))
    for k, Ik in enumerate(part):
        for l, Il in enumerate(part):
            P[k, l] = g[list(Ik)] @ (-model.M[np.ix_(Ik, Il)] @ g[list(Il)])
    return P


def mobility_split(M) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric and skew parts of ``M``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("M must be square")
    return 0.5 * (M + M.T), 0.5 * (M - M.T)


def _classify_matrix(A: np.ndarray, rtol: float) -> str:
    S = 0.5 * (A + A.T)
    tol = rtol * max(1.0, float(np.max(np.abs(A))))
    lam = np.linalg.eigvalsh(S)
    if np.all(np.abs(lam) <= tol):
        return "conservative"
    if np.all(lam >= -tol):
        return "dissipative"
    return "indefinite"


def dissipativity_check(model: GradientFlowModel, states: Sequence, rtol: float = 1e-12) -> str:
    """Classify the flow by the symmetric part of ``M D^2 P`` at the sample states.

    ``"dissipative"`` when it is positive semi-definite and nonzero somewhere,
    ``"conservative"`` when it vanishes at every sample, otherwise
    ``"indefinite"`` (this includes negative definite, i.e. expanding, flows).
    """
    kinds = {_classify_matrix(model.M @ np.asarray(model.hessian(np.asarray(x, dtype=float))), rtol)
             for x in states}
    if "indefinite" in kinds:
        return "indefinite"
    if "dissipative" in kinds:
        return "dissipative"
    return "conservative"


def quadratic_gradient_flow(M, Q, partition) -> GradientFlowModel:
    """Gradient flow with potential ``0.5 x^T Q x``."""
    Q = np.array(Q, dtype=float)
    return GradientFlowModel(
        np.asarray(M, dtype=float),
        potential=lambda x: 0.5 * float(x @ Q @ x),
        gradient=lambda x: Q @ x,
        hessian=lambda x: Q,
        partition=partition,
    )


def coupled_oscillators(kappa: float = 0.5, damping: float = 0.0) -> GradientFlowModel:
    """Two unit oscillators ``(q1, p1), (q2, p2)`` with skew coupling ``kappa``.

    Potential ``0.5 |x|^2``; ``damping`` sits on ``p1``.
    """
    M = np.zeros((4, 4))
    M[0, 1], M[1, 0] = -1.0, 1.0
    M[2, 3], M[3, 2] = -1.0, 1.0
    M[1, 2], M[2, 1] = kappa, -kappa
    M[1, 1] = damping
    return quadratic_gradient_flow(M, np.eye(4), ((0, 1), (2, 3)))


def _check_separable(model: GradientFlowModel, rng) -> None:
    for _ in range(3):
        x = rng.uniform(-2, 2, model.n)
        Hs = np.asarray(model.hessian(x), dtype=float)
        for k, Ik in enumerate(model.partition):
            for l, Il in enumerate(model.partition):
                if k != l and np.any(Hs[np.ix_(Ik, Il)] != 0):
                    raise ValueError("potential must be separable over the partition to split it")


def gradient_flow_problem(model: GradientFlowModel, x0, name: str = "gradient-flow") -> CosimProblem:
    """Split a separable gradient flow into one block per partition set.

    Block ``k`` receives the gradients ``g_l`` of its coupling partners and
    their rates; it outputs its own gradient and gradient rate. A block with
    a single partner gets a power port: the power into ``k`` is
    ``<g_k, -M_kl g_l>``, reconstructed through the last component of ``g_l``
    whose column in ``M_kl`` is nonzero.
    """
    part = model.partition
    flat = [i for b in part for i in b]
    if flat != list(range(model.n)):
        raise ValueError("co-simulation split needs contiguous, ordered partition sets")
    _check_separable(model, np.random.default_rng(0))
    M = model.M
    n = model.n
    partners = [[l for l in range(len(part)) if l != k and np.any(M[np.ix_(part[k], part[l])] != 0)]
                for k in range(len(part))]

    def block_grad(k, xk):
        full = np.zeros(n)
        full[list(part[k])] = xk
        return np.asarray(model.gradient(full), dtype=float)[list(part[k])]

    def block_hess(k, xk):
        full = np.zeros(n)
        full[list(part[k])] = xk
        return np.asarray(model.hessian(full), dtype=float)[np.ix_(part[k], part[k])]

    # input layout of block k: for each partner l, [g_l, g_l']
    slots = []
    for k in range(len(part)):
        off, s = 0, {}
        for l in partners[k]:
            s[l] = off
            off += 2 * len(part[l])
        slots.append((s, off))

    blocks = []
    for k, Ik in enumerate(part):
        s, dim = slots[k]
        Mkk = M[np.ix_(Ik, Ik)]
        Mkl = {l: M[np.ix_(Ik, part[l])] for l in partners[k]}
        nl = {l: len(part[l]) for l in partners[k]}

        def rhs(t, x, u, k=k, s=s, Mkk=Mkk, Mkl=Mkl, nl=nl):
            dx = -Mkk @ block_grad(k, x)
            for l, o in s.items():
                dx = dx - Mkl[l] @ u[o:o + nl[l]]
            return dx

        def out(t, x, u, k=k, rhs=rhs):
            return np.concatenate([block_grad(k, x), block_hess(k, x) @ rhs(t, x, u)])

        power = rate = None
        if len(partners[k]) == 1:
            (l,) = partners[k]
            o = s[l]

            def power(x, u, k=k, A=Mkl[l], o=o, m=nl[l]):
                return float(block_grad(k, x) @ (-A @ u[o:o + m]))

            def rate(x, u, k=k, A=Mkl[l], o=o, m=nl[l], rhs=rhs):
                g, xd = block_grad(k, x), rhs(0.0, x, u)
                return float((block_hess(k, x) @ xd) @ (-A @ u[o:o + m])
                             + g @ (-A @ u[o + m:o + 2 * m]))

        blocks.append(SubsystemBlock(f"S{k + 1}", len(Ik), dim, 2 * len(Ik), rhs, out, power, rate))

    conns = []
    for k in range(len(part)):
        s, _ = slots[k]
        pc = len(partners[k]) == 1 and all(len(partners[l]) == 1 for l in partners[k])
        for l, o in s.items():
            m = len(part[l])
            cols = np.flatnonzero(np.any(M[np.ix_(part[k], part[l])] != 0, axis=0))
            conns.append(Connection(
                l, k, tuple(range(2 * m)), tuple(range(o, o + 2 * m)),
                source_derivatives=tuple(list(range(m, 2 * m)) + [None] * m),
                power_coupled=pc, replaced_component=(o + int(cols[-1])) if pc else None))

    x0 = np.asarray(x0, dtype=float)
    return CosimProblem(
        name, blocks, conns, x0,
        energy=lambda x: float(model.potential(np.asarray(x, dtype=float))),
        reference=lambda t: model.reference(x0, t),
        labels=[f"x{i + 1}" for i in range(n)])


MODEL_NAMES = ("linear-uni", "linear-mutual", "spring-mass", "gradient-flow")

_DEFAULT_PARAMS = {
    "linear-uni": {"x1": 1.0, "x2": 1.0},
    "linear-mutual": {"x1": 1.0, "x2": 1.0},
    "spring-mass": {"m": 1.0, "c": 1.0, "d": 0.0, "x0": 1.0, "v0": 0.0},
    "gradient-flow": {"kappa": 0.5, "damping": 0.0, "q1": 1.0, "p1": 0.0, "q2": 0.0, "p2": 0.0},
}


def default_params(name: str) -> dict[str, float]:
    if name not in _DEFAULT_PARAMS:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    return dict(_DEFAULT_PARAMS[name])


def build_problem(name: str, params: Optional[dict] = None) -> CosimProblem:
    """Benchmark by CLI name with parameter overrides."""
    p = default_params(name)
    for key, value in (params or {}).items():
        if key not in p:
            raise ValueError(f"unknown parameter {key!r} for model {name!r}")
        p[key] = float(value)
    if name == "linear-uni":
        return linear_uni().problem((p["x1"], p["x2"]), name)
    if name == "linear-mutual":
        return linear_mutual().problem((p["x1"], p["x2"]), name)
    if name == "spring-mass":
        return SpringMassModel(p["m"], p["c"], p["d"]).problem(p["x0"], p["v0"])
    model = coupled_oscillators(p["kappa"], p["damping"])
    return gradient_flow_problem(model, [p["q1"], p["p1"], p["q2"], p["p2"]], name)
