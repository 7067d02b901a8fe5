import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosim.coupling import (
    Connection,
    CouplingError,
    MasterConfig,
    NonMonotonePowerMap,
    Scheme,
    SubsystemBlock,
    exchange_balance_corrected,
    exchange_plain,
    invert_power,
    negotiate_power,
    run_master,
)
from cosim.extrapolation import SampleHistory
from cosim.models import SpringMassModel, build_problem
from cosim.solvers import IntegratorConfig, integrate

SM = SpringMassModel()


def ramp_problem(slope=1.0, x0=(0.0, 0.5)):
    """Source ``a' = slope`` feeding ``b' = a``; the exchanged signal is linear in time."""
    src = SubsystemBlock("src", 1, 0, 2, lambda t, x, u: np.array([slope]),
                         lambda t, x, u: np.array([x[0], slope]))
    sink = SubsystemBlock("sink", 1, 1, 1, lambda t, x, u: np.array([u[0]]),
                          lambda t, x, u: np.array([x[0]]))
    conn = Connection(0, 1, (0,), (0,), source_derivatives=(1,))
    return [src, sink], [conn], np.array(x0, dtype=float)


def pn_run(H=0.2, t_end=4.0, x0=1.0, v0=0.0, **kw):
    pr = SM.problem(x0, v0)
    cfg = MasterConfig(scheme="power_negotiated", degree=1, hermite=True, H=H, t_end=t_end, **kw)
    return run_master(pr.blocks, pr.connections, pr.x0, cfg, pr.energy)


# -- negotiation ------------------------------------------------------------------

def test_negotiation_idle_for_agreeing_views():
    # S1 sees 3 flowing in, S2 sees -3 flowing in
    assert negotiate_power(-3.0, 3.0) == -3.0
    assert negotiate_power(3.0, -3.0) == 3.0


def test_negotiation_average():
    assert negotiate_power(-4.0, 2.0) == -3.0


def test_negotiation_zero():
    assert negotiate_power(0.0, 0.0) == 0.0


@given(st.floats(allow_nan=False, allow_infinity=False, width=64, min_value=-1e300, max_value=1e300),
       st.floats(allow_nan=False, allow_infinity=False, width=64, min_value=-1e300, max_value=1e300))
def test_negotiation_bitwise_antisymmetric(a, b):
    assert negotiate_power(a, b) + negotiate_power(b, a) == 0.0


# -- inversion ----------------------------------------------------------------------

def test_invert_spring():
    res = invert_power(SM.spring_block(), 1.0, 0.0, [0.5], [0.0, 0.0], 0)
    assert res.value == 2.0 and not res.singular


def test_invert_mass():
    # the spring side agreed on 1, so the mass receives -1
    res = invert_power(SM.mass_block(), lambda t: -1.0, 0.0, [2.0], [0.0, 0.0], 0)
    assert res.value == -0.5


def test_invert_zero_power():
    assert invert_power(SM.spring_block(), 0.0, 0.0, [0.3], [0.0, 0.0], 0).value == 0.0


def test_invert_guard():
    res = invert_power(SM.spring_block(), 1e-3, 0.0, [1e-8], [0.0, 0.0], 0, eps=1e-6)
    assert res.singular
    assert math.isfinite(res.value)
    assert abs(res.denominator) < 1e-6


def test_invert_residual_when_regular():
    blk = SM.spring_block()
    for s, p in ((0.7, 0.3), (-1.2, 2.0), (1e-3, -1e-4)):
        v = invert_power(blk, p, 0.0, [s], [0.0, 0.0], 0).value
        assert abs(blk.power_map(np.array([s]), np.array([v, 0.0])) - p) <= 1e-10


def test_invert_non_monotone():
    blk = SubsystemBlock(
        "cubic", 1, 1, 1, lambda t, x, u: u, lambda t, x, u: x,
        power_map=lambda x, u: u[0] ** 3 - 3 * u[0],
        power_inverse=lambda p, x, u: math.sqrt(3.0))
    with pytest.raises(NonMonotonePowerMap):
        invert_power(blk, 0.0, 0.0, [1.0], [0.0], 0)


# -- exchange rules -------------------------------------------------------------------

def test_first_interval_linear_falls_back_to_constant():
    hist = SampleHistory(np.array([0.0]), np.array([[2.0]]), np.array([[np.nan]]))
    cfg = MasterConfig(degree=1, H=0.5, t_end=1.0)
    (ext,) = exchange_plain([None], [hist], 1, cfg)
    assert ext.degree == 0 and ext(0.3)[0] == 2.0


def test_hermite_uses_exchanged_derivative():
    hist = SampleHistory(np.array([0.0]), np.array([[2.0]]), np.array([[-4.0]]))
    cfg = MasterConfig(degree=1, hermite=True, H=0.5, t_end=1.0)
    (ext,) = exchange_plain([None], [hist], 1, cfg)
    assert np.array_equal(ext.coeffs, [[2.0], [-4.0]])


def test_correction_integral_on_next_interval():
    hist = SampleHistory(np.array([0.0, 1.0]), np.array([[0.0], [1.0]]))
    cfg = MasterConfig(scheme="balance_corrected", degree=0, H=1.0, t_end=3.0)
    (ext,) = exchange_balance_corrected([None], [hist], 2, cfg, [np.array([0.5])])
    extra = ext.integral(1.0, 2.0) - ext.without_correction().integral(1.0, 2.0)
    assert extra[0] == pytest.approx(0.5, abs=1e-15)


def test_constant_extrapolation_jumps_by_output_change():
    blocks, conns, x0 = ramp_problem()
    tr = run_master(blocks, conns, x0, MasterConfig(H=0.25, t_end=1.0))
    for k in range(4):
        a = 0.25 * k
        assert tr.block_input(1, a + 0.1)[0] == pytest.approx(a, abs=1e-12)


# -- master properties -----------------------------------------------------------------

def test_constant_signal_bc_equals_plain():
    blocks, conns, x0 = ramp_problem(slope=0.0, x0=(0.7, 0.0))
    plain = run_master(blocks, conns, x0, MasterConfig(H=0.1, t_end=1.0))
    bc = run_master(blocks, conns, x0, MasterConfig(scheme="balance_corrected", H=0.1, t_end=1.0))
    assert np.all(bc.balance_errors == 0) and np.all(bc.refed == 0)
    # the corrected run stops at the hat kinks, so only round-off differs
    np.testing.assert_allclose(bc.states, plain.states, rtol=0, atol=1e-14)


def test_linear_signal_reproduced_and_bc_idle():
    blocks, conns, x0 = ramp_problem()
    kw = dict(H=0.1, t_end=2.0, degree=1, hermite=True)
    plain = run_master(blocks, conns, x0, MasterConfig(**kw))
    bc = run_master(blocks, conns, x0, MasterConfig(scheme="balance_corrected", **kw))
    assert np.max(np.abs(plain.balance_errors)) < 1e-14
    np.testing.assert_allclose(bc.states, plain.states, rtol=0, atol=1e-13)
    # monolithic: a = t, b = 0.5 + t^2 / 2
    t = plain.sample_times
    np.testing.assert_allclose(plain.states[:, 1], 0.5 + 0.5 * t * t, rtol=0, atol=1e-11)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_single_block_matches_monolithic(scheme):
    blk = SubsystemBlock("whole", 2, 0, 2, lambda t, x, u: np.array([x[1], -x[0]]),
                         lambda t, x, u: x.copy())
    x0 = np.array([1.0, 0.0])
    tr = run_master([blk], [], x0, MasterConfig(scheme=scheme, H=0.5, t_end=10.0))
    mono, _ = integrate(lambda t, x: np.array([x[1], -x[0]]), x0, 0.0, 10.0, IntegratorConfig())
    np.testing.assert_allclose(tr.final_state, mono, rtol=0, atol=1e-10)
    np.testing.assert_allclose(tr.final_state, [math.cos(10.0), -math.sin(10.0)], atol=1e-10)


def test_concurrent_matches_sequential():
    seq = pn_run(t_end=6.0)
    par = pn_run(t_end=6.0, concurrent=True)
    again = pn_run(t_end=6.0)
    for other in (par, again):
        assert np.array_equal(seq.states, other.states)
        assert np.array_equal(seq.phat, other.phat)
        assert seq.spans == other.spans


def test_both_sides_hold_identical_power_extrapolant():
    tr = pn_run(t_end=3.0)
    for k in range(tr.n_intervals):
        spring, mass = tr.inputs[0][k].target, tr.inputs[1][k].target
        assert np.array_equal(spring.coeffs, -mass.coeffs)


@settings(max_examples=8, deadline=None)
@given(x0=st.floats(-2, 2), v0=st.floats(-2, 2), H=st.sampled_from([0.1, 0.2, 0.25]))
def test_negotiated_power_antisymmetric(x0, v0, H):
    tr = pn_run(H=H, t_end=10 * H, x0=x0, v0=v0)
    assert tr.power_connections == [0, 1]
    assert np.all(tr.phat[:, 0] + tr.phat[:, 1] == 0.0)
    assert np.all(tr.phat_rate[:, 0] + tr.phat_rate[:, 1] == 0.0)


@settings(max_examples=6, deadline=None)
@given(x0=st.floats(0.2, 2), v0=st.floats(-2, 2), H=st.sampled_from([0.1, 0.2]))
def test_power_residual_outside_spans(x0, v0, H):
    tr = pn_run(H=H, t_end=20 * H, x0=x0, v0=v0)
    T = tr.exchange_times
    for k in range(tr.n_intervals):
        for t in T[k] + (np.arange(10) + 0.5) * (T[k + 1] - T[k]) / 10:
            for c in tr.power_connections:
                if tr.in_span(t, tr.connections[c].target):
                    continue
                assert tr.power_residual(c, t) <= 1e-9


def test_gradient_flow_runs_under_all_schemes():
    pr = build_problem("gradient-flow")
    for scheme in Scheme:
        cfg = MasterConfig(scheme=scheme, degree=1, hermite=True, H=0.1, t_end=2.0)
        tr = run_master(pr.blocks, pr.connections, pr.x0, cfg, pr.energy)
        assert np.linalg.norm(tr.final_state - pr.reference(2.0)) < 1e-2


# -- wiring errors ------------------------------------------------------------------

def test_wrong_state_dimension():
    pr = SM.problem()
    with pytest.raises(CouplingError):
        run_master(pr.blocks, pr.connections, np.zeros(3), MasterConfig(H=0.5, t_end=1.0))


def test_input_fed_twice():
    blocks, conns, x0 = ramp_problem()
    with pytest.raises(CouplingError):
        run_master(blocks, conns + conns, x0, MasterConfig(H=0.5, t_end=1.0))


def test_index_out_of_range():
    blocks, _, x0 = ramp_problem()
    with pytest.raises(CouplingError):
        run_master(blocks, [Connection(0, 1, (5,), (0,))], x0, MasterConfig(H=0.5, t_end=1.0))


def test_power_coupling_needs_reverse_connection():
    pr = SM.problem()
    cfg = MasterConfig(scheme="power_negotiated", H=0.5, t_end=1.0)
    with pytest.raises(CouplingError, match="reverse"):
        run_master(pr.blocks, pr.connections[:1], pr.x0, cfg)


def test_power_coupling_needs_power_maps():
    pr = SM.problem()
    blocks = [pr.blocks[0], dataclasses.replace(pr.blocks[1], power_map=None)]
    cfg = MasterConfig(scheme="power_negotiated", H=0.5, t_end=1.0)
    with pytest.raises(CouplingError, match="power map"):
        run_master(blocks, pr.connections, pr.x0, cfg)


def test_connection_validation():
    with pytest.raises(ValueError):
        Connection(0, 1, (0, 1), (0,))
    with pytest.raises(ValueError):
        Connection(0, 1, (0,), (0,), power_coupled=True)
    with pytest.raises(ValueError):
        Connection(0, 1, (0,), (0,), power_coupled=True, replaced_component=3)


def test_partial_final_interval_rejected():
    with pytest.raises(ValueError):
        MasterConfig(H=0.3, t_end=1.0)
    assert MasterConfig(H=0.1, t_end=0.3).n_intervals == 3


def test_integrator_failure_names_interval():
    blk = SubsystemBlock("blowup", 1, 0, 1, lambda t, x, u: x * x, lambda t, x, u: x.copy())
    with pytest.raises(CouplingError) as info:
        run_master([blk], [], np.array([1.0]), MasterConfig(H=0.5, t_end=2.0))
    assert info.value.interval == 2
