import io
import math

import numpy as np
import pytest

from bondsim import BondGraphError, SimConfig, SingularParameterError, compile_graph, energy_report, simulate
from bondsim.models import build
from bondsim.sim import step_count

from conftest import compile_text, filter_text, lc_graph, rl_graph


def lc_error(dt, t_end=10.0):
    traj = simulate(compile_graph(lc_graph()), SimConfig(t_end, dt))
    p, q = traj.x[:, 0], traj.x[:, 1]
    return max(np.max(np.abs(p - np.cos(traj.t))), np.max(np.abs(q - np.sin(traj.t))))


def test_zero_lc_stays_at_rest(backend):
    traj = simulate(compile_graph(lc_graph(p0=0.0)), SimConfig(1.0, 1e-2))
    assert not traj.x.any()
    assert not any(v.any() for v in traj.efforts.values())
    bal = energy_report(traj)
    assert (bal.E_supplied, bal.E_stored_delta, bal.E_dissipated) == (0.0, 0.0, 0.0)


def test_lc_matches_analytic_solution(backend):
    assert lc_error(1e-3) < 1e-6


def test_rk4_convergence_order(backend):
    ratio = lc_error(1e-3) / lc_error(5e-4)
    assert 12.0 <= ratio <= 20.0, ratio


def test_rl_step_response(backend):
    traj = simulate(compile_graph(rl_graph()), SimConfig(1.0, 1e-3))
    assert traj.t[-1] == 1.0
    assert abs(traj.flows["b3"][-1, 0] - (1.0 - math.exp(-1.0))) < 1e-6


def test_rl_supplied_energy():
    traj = simulate(compile_graph(rl_graph()), SimConfig(5.0, 1e-3))
    bal = energy_report(traj)
    assert abs(bal.E_supplied - (5.0 - 1.0 + math.exp(-5.0))) < 1e-5
    assert abs(bal.residual) < 1e-9


def test_lc_energy_over_whole_period():
    traj = simulate(compile_graph(lc_graph()), SimConfig(2 * math.pi, 1e-3))
    bal = energy_report(traj)
    assert bal.E_dissipated == 0.0 and bal.E_supplied == 0.0
    assert abs(bal.E_stored_delta) < 1e-6


@pytest.mark.parametrize("name", ["lift_a_load", "solenoid", "filter_chopper"])
def test_dissipation_is_monotone_and_positive(name):
    sys = compile_graph(build(name))
    traj = simulate(sys, SimConfig(0.2, 1e-4, record_every=10))
    assert np.all(np.diff(traj.dissipated) >= -1e-15)
    for e in sys.graph.elements:
        if e.kind.value == "R":
            assert traj.powers[e.id].min() >= -1e-12


@pytest.mark.parametrize("name", ["lift_a_load", "solenoid", "filter_chopper"])
def test_residual_shrinks_with_dt(name):
    sys = compile_graph(build(name))
    res = []
    for dt in (4e-4, 2e-4, 1e-4):
        bal = energy_report(simulate(sys, SimConfig(0.3, dt)))
        res.append(abs(bal.residual))
        floor = 1e-12 * abs(bal.E_supplied)  # rounding floor of the accumulators
    for coarse, fine in zip(res, res[1:]):
        assert fine <= max(coarse / 2, floor), res


def test_recording_grid_and_decimation():
    sys = compile_graph(rl_graph())
    traj = simulate(sys, SimConfig(0.1, 0.003, record_every=4))
    n = step_count(0.1, 0.003)
    assert n == 34
    assert len(traj) == len(range(0, n, 4)) + 1
    assert traj.t[-1] == 0.1
    full = simulate(sys, SimConfig(0.1, 0.003))
    assert np.array_equal(full.x[::4], traj.x[:-1])
    assert np.array_equal(full.x[-1], traj.x[-1])


def test_zero_duration():
    traj = simulate(compile_graph(lc_graph()), SimConfig(0.0, 1e-3))
    assert len(traj) == 1 and traj.x[0, 0] == 1.0


@pytest.mark.parametrize("bad", [dict(t_end=1, dt=0), dict(t_end=-1, dt=1), dict(t_end=1, dt=0.1, record_every=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SimConfig(**bad)


def test_unknown_binding():
    with pytest.raises(KeyError):
        simulate(compile_graph(rl_graph()), SimConfig(1, 0.1, inputs={"nope": 1}))


def test_bindings_expression_callable_and_constant_agree(backend):
    sys = compile_graph(rl_graph())
    a = simulate(sys, SimConfig(0.5, 1e-3, inputs={"src": "2 * sin(3 * t)"}))
    b = simulate(sys, SimConfig(0.5, 1e-3, inputs={"src": lambda t: 2 * math.sin(3 * t)}))
    assert np.max(np.abs(a.x - b.x)) < 1e-15
    c = simulate(sys, SimConfig(0.5, 1e-3, inputs={"src": 2.0}))
    d = simulate(compile_graph(rl_graph(E=2.0)), SimConfig(0.5, 1e-3))
    assert np.array_equal(c.x, d.x)


def test_initial_state_override():
    sys = compile_graph(lc_graph())
    traj = simulate(sys, SimConfig(0.1, 1e-3), x0=[0.0, 1.0])
    assert traj.x[0].tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        simulate(sys, SimConfig(0.1, 1e-3), x0=[1.0])


def test_singularity_reports_time(backend):
    text = filter_text(m_ch="0").replace("element I L_F { k = 1.0 }", "element MI L_F { k = 0.5 - t }")
    with pytest.raises(SingularParameterError) as info:
        simulate(compile_text(text), SimConfig(1.0, 0.01))
    assert info.value.element == "L_F"
    assert 0.4 <= info.value.t <= 0.5


def test_non_finite_state_aborts(backend):
    text = """model blowup
element SE s { value = 1e300 }
element 1 j
element I m { k = 1e-300 }
element R r { k = -1e300 }
bond b1 s -> j
bond b2 j -> m
bond b3 j -> r
"""
    with pytest.raises(BondGraphError, match="non-finite"):
        simulate(compile_text(text), SimConfig(1.0, 0.1))


def test_csv_format():
    sys = compile_graph(build("filter_chopper"))
    traj = simulate(sys, SimConfig(0.01, 1e-3))
    text = traj.to_csv()
    lines = text.splitlines()
    assert lines[0].startswith("t,e.b1,f.b1,e.b2,f.b2")
    assert lines[0].endswith(",P.u_in")
    assert len(lines) == len(traj) + 1
    row = lines[1].split(",")
    assert len(row) == len(lines[0].split(","))
    assert all(float(v) == float(v) for v in row)
    buf = io.StringIO()
    traj.to_csv(buf)
    assert buf.getvalue() == text
    assert simulate(sys, SimConfig(0.01, 1e-3)).to_csv() == text


def test_csv_vector_bonds():
    from bondsim.core import GraphBuilder

    b = GraphBuilder()
    b.element("SE", "s", [1.0, 2.0])
    b.element("1", "j")
    b.element("R", "r", [[1.0, 0.0], [0.0, 2.0]])
    b.bond("b1", "s", "j", dim=2)
    b.bond("b2", "j", "r", dim=2)
    traj = simulate(compile_graph(b.build()), SimConfig(0.0, 1.0))
    header = traj.to_csv().splitlines()[0]
    assert header == "t,e.b1.1,e.b1.2,f.b1.1,f.b1.2,e.b2.1,e.b2.2,f.b2.1,f.b2.2"


def test_trapezoid_estimate_converges_to_accumulator():
    # the grid trapezoid rule is second order, so its gap to the RK4
    # accumulator should drop about fourfold per halving of dt
    sys = compile_graph(build("lift_a_load"))
    gaps = []
    for dt in (2e-4, 1e-4):
        traj = simulate(sys, SimConfig(0.2, dt))
        gaps.append(abs(traj.supplied_trapezoid()[-1] - traj.supplied[-1]))
    assert 3.0 < gaps[0] / gaps[1] < 5.0, gaps


def test_energy_report_rejects_empty():
    from bondsim.sim import Trajectory

    sys = compile_graph(lc_graph())
    with pytest.raises(ValueError):
        energy_report(Trajectory(sys, np.zeros((0, len(sys.program.slots)))))
