import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bondsim import SimConfig, StateSpace, compile_graph, evaluate, extract, simulate, transfer_function
from bondsim.core import GraphBuilder
from bondsim.lti import MAX_ORDER, characteristic_and_adjugate
from bondsim.models import FilterChopperParams, build, filter_chopper

from conftest import compile_text, filter_text, rl_graph


def poly_det(M):
    """det(sI - A) by cofactor expansion over polynomial entries (highest power first)."""
    n = len(M)
    if n == 0:
        return np.array([1.0])
    if n == 1:
        return np.asarray(M[0][0], dtype=float)
    total = np.array([0.0])
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in M[1:]]
        term = np.polymul(M[0][j], poly_det(minor))
        total = np.polyadd(total, term if j % 2 == 0 else -term)
    return total


def charpoly_by_expansion(A):
    n = A.shape[0]
    M = [[np.array([1.0, -A[i, j]]) if i == j else np.array([-A[i, j]]) for j in range(n)] for i in range(n)]
    p = np.trim_zeros(poly_det(M), "f")
    return np.concatenate([np.zeros(n + 1 - len(p)), p])


def test_filter_example_matrices():
    ss = extract(compile_text(filter_text(1.0, 1.0, 1.0)))
    assert ss.state_labels == ("p.L_F", "q.C_F")
    assert np.array_equal(ss.A, [[-1.0, -1.0], [1.0, 0.0]])
    assert np.array_equal(ss.B, [[1.0], [0.0]])
    tf = transfer_function(ss, 0, 0)
    assert np.allclose(tf.den, [1.0, 1.0, 1.0])
    assert np.allclose(tf.num, [0.0, 0.0, 1.0])


def test_pure_integrator():
    b = GraphBuilder()
    b.element("SE", "s", 1.0)
    b.element("1", "j")
    b.element("I", "m", 1.0)
    b.bond("b1", "s", "j")
    b.bond("b2", "j", "m")
    b.probe("m", "momentum")
    ss = extract(compile_graph(b.build()))
    assert ss.A.tolist() == [[0.0]] and ss.B.tolist() == [[1.0]]
    tf = transfer_function(ss)
    assert tf.num.tolist() == [0.0, 1.0] and tf.den.tolist() == [1.0, 0.0]
    assert tf(2.0) == pytest.approx(0.5)


def test_static_gain():
    ss = StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), np.array([[2.5]]))
    tf = transfer_function(ss)
    assert tf.num.tolist() == [2.5] and tf.den.tolist() == [1.0]


def test_filter_eigenvalues_match_rlc_roots():
    rng = np.random.default_rng(2024)
    for _ in range(10):
        R, L, C = rng.uniform(0.01, 10.0, size=3)
        ss = extract(compile_text(filter_text(R, L, C)))
        got = np.sort_complex(np.linalg.eigvals(ss.A))
        want = np.sort_complex(np.roots([L * C, R * C, 1.0]))
        assert np.max(np.abs(got - want) / np.abs(want)) < 1e-9


def fd_jacobian(sys, x, u, h=1e-6):
    J = np.zeros((sys.nx, sys.nx))
    for j in range(sys.nx):
        d = np.zeros(sys.nx)
        d[j] = h * max(1.0, abs(x[j]))
        J[:, j] = (evaluate(sys, 0.0, x + d, u).dx - evaluate(sys, 0.0, x - d, u).dx) / (2 * d[j])
    return J


@pytest.mark.parametrize("name", ["lift_a_load", "filter_chopper"])
def test_a_matches_finite_difference_jacobian(name):
    sys = compile_graph(build(name))
    ss = extract(sys)
    rng = np.random.default_rng(5)
    for _ in range(5):
        x = rng.normal(size=sys.nx)
        J = fd_jacobian(sys, x, sys.u0)
        assert np.max(np.abs(J - ss.A)) <= 1e-6 * np.max(np.abs(ss.A))


def test_solenoid_linearization_is_frozen_and_finite():
    sys = compile_graph(build("solenoid"))
    x0 = sys.x0
    ss = extract(sys, operating_point=(0.0, x0, sys.u0))
    assert ss.frozen and "frozen" in ss.to_text()
    assert np.all(np.isfinite(ss.A))
    assert ss.A.shape == (3, 3)
    # freezing at x0 leaves the derivative at x0 unchanged
    dx = evaluate(sys, 0.0, x0).dx
    assert np.allclose(ss.A @ x0 + ss.B @ sys.u0, dx, rtol=1e-12, atol=1e-12 * np.abs(dx).max())


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4).flatmap(lambda n: st.lists(
    st.floats(-10, 10, allow_nan=False), min_size=n * n, max_size=n * n).map(lambda v: np.reshape(v, (n, n)))))
def test_faddeev_leverrier_matches_determinant(A):
    den, _ = characteristic_and_adjugate(A)
    ref = charpoly_by_expansion(A)
    assert np.allclose(den, ref, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(ref).max()))


def test_adjugate_reconstructs_resolvent():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(4, 4))
    den, mats = characteristic_and_adjugate(A)
    s = 0.7 + 1.3j
    adj = sum(M * s ** (4 - k) for k, M in enumerate(mats, start=1))
    assert np.allclose(adj / np.polyval(den, s), np.linalg.inv(s * np.eye(4) - A))


def test_order_limit():
    with pytest.raises(ValueError):
        characteristic_and_adjugate(np.zeros((MAX_ORDER + 1, MAX_ORDER + 1)))


def rk4_state_space(ss, x0, u, dt, t_end):
    f = lambda x: ss.A @ x + ss.B @ u  # noqa: E731
    n = int(round(t_end / dt))
    xs = [np.array(x0, dtype=float)]
    x = xs[0]
    for _ in range(n):
        k1 = f(x)
        k2 = f(x + dt / 2 * k1)
        k3 = f(x + dt / 2 * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        xs.append(x)
    return np.array(xs)


@pytest.mark.parametrize("text", ["lift", filter_text(0.1, 0.01, 0.001, u_in=24.0)], ids=["lift", "filter"])
def test_state_space_and_ode_trajectories_agree(text):
    # graphs whose only excitation is a constant source, so evaluate is linear in (x, u)
    sys = compile_graph(build("lift_a_load")) if text == "lift" else compile_text(text)
    ss = extract(sys)
    traj = simulate(sys, SimConfig(0.2, 1e-3))
    ref = rk4_state_space(ss, sys.x0, sys.u0, 1e-3, 0.2)
    assert np.max(np.abs(traj.x - ref)) <= 1e-9 * max(1.0, np.abs(ref).max())


def test_outputs_and_power_probe():
    sys = compile_text(filter_text(1.0, 2.0, 3.0, u_in=5.0) + "probe u_in power\nprobe b3 flow\n")
    x0 = np.array([0.4, 0.0])
    ss = extract(sys, operating_point=(0.0, x0, sys.u0))
    assert ss.output_labels == ("displacement.C_F", "power.u_in", "flow.b3")
    assert ss.C[0].tolist() == [0.0, 1.0]
    assert ss.C[2].tolist() == [0.5, 0.0]  # i = p / L
    # P_absorbed(u_in) = -u * p / L, linearized about (p0, u0)
    assert ss.C[1, 0] == pytest.approx(-5.0 / 2.0)
    assert ss.D[1, 0] == pytest.approx(-0.4 / 2.0)


def test_text_round_trip():
    ss = extract(compile_graph(build("lift_a_load")))
    text = ss.to_text()
    assert "A 5 5" in text and "B 5 2" in text
    back = StateSpace.from_text(text)
    assert back == ss
    assert back.to_text() == text


def test_text_rejects_missing_blocks():
    with pytest.raises(ValueError):
        StateSpace.from_text("A 1 1\n0\n")


def test_inconsistent_shapes():
    with pytest.raises(ValueError):
        StateSpace(np.zeros((2, 2)), np.zeros((3, 1)), np.zeros((1, 2)), np.zeros((1, 1)))


def test_singular_frozen_parameter():
    text = filter_text(m_ch="0").replace("element I L_F { k = 1.0 }", "element MI L_F { k = t - 1 }")
    sys = compile_text(text)
    with pytest.raises(Exception) as info:
        extract(sys, operating_point=(1.0, [0.0, 0.0], sys.u0))
    assert "L_F" in str(info.value)


def test_transfer_function_index_checks():
    ss = extract(compile_graph(rl_graph()), outputs=["flow.b3"])
    with pytest.raises(IndexError):
        transfer_function(ss, 1, 0)


def test_default_parameter_filter_is_underdamped():
    p = FilterChopperParams()
    ss = extract(compile_graph(filter_chopper(p)))
    ev = np.linalg.eigvals(ss.A)
    assert np.all(ev.real < 0) and np.all(np.abs(ev.imag) > 0)
