import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from se3gate import _kernels as K
from se3gate.dynamics import (
    GateMotion, QuadParams, QuadState, gate_state_at, hover_state, integrate_quad, make_state, mixer, quad_derivative,
)
from se3gate.errors import NonFinite
from se3gate.se3 import axis_angle_to_quat, quat_to_rotmat

P = QuadParams()

thrusts = st.lists(st.floats(0.0, P.f_max), min_size=4, max_size=4)


def allocation_oracle(u, arm, c):
    """Rotor positions and spin signs written out one rotor at a time."""
    d = arm / np.sqrt(2.0)
    pos = [(d, d), (-d, d), (-d, -d), (d, -d)]
    spin = [1.0, -1.0, 1.0, -1.0]
    tau = np.zeros(3)
    for f, (x, y), s in zip(u, pos, spin):
        tau += np.cross([x, y, 0.0], [0.0, 0.0, f])
        tau[2] += s * c * f
    return sum(u), tau


def test_params_validation():
    with pytest.raises(ValueError):
        QuadParams(m=0.0)
    with pytest.raises(ValueError):
        QuadParams(J=((1, 0, 0), (0, -1, 0), (0, 0, 1)))
    with pytest.raises(ValueError):
        GateMotion(width=0.0)


def test_mixer_examples():
    f, tau = mixer([1.5] * 4, P)
    assert f == pytest.approx(6.0) and np.allclose(tau, 0.0)
    f, tau = mixer(np.zeros(4), P)
    assert f == 0.0 and np.array_equal(tau, np.zeros(3))
    u = [P.f_max, 0, 0, 0]
    f, tau = mixer(u, P)
    f_o, tau_o = allocation_oracle(u, P.arm, P.c_tau)
    assert f == pytest.approx(f_o) and np.allclose(tau, tau_o, atol=1e-15)


@given(thrusts)
def test_mixer_matches_oracle(u):
    f, tau = mixer(u, P)
    f_o, tau_o = allocation_oracle(u, P.arm, P.c_tau)
    assert f == pytest.approx(f_o, abs=1e-12)
    assert np.allclose(tau, tau_o, atol=1e-12)


def test_derivative_examples():
    x = hover_state([1.0, 2.0, 3.0])
    assert np.allclose(quad_derivative(x, [P.hover_thrust] * 4, P), 0.0, atol=1e-15)
    d = quad_derivative(x, np.zeros(4), P)
    assert np.allclose(d[3:6], [0, 0, -P.g])
    x = make_state(w=[0, 0, 1])
    d = quad_derivative(x, [P.hover_thrust] * 4, P)
    assert np.allclose(d[6:10], [0, 0, 0, 0.5], atol=1e-15)


def test_derivative_quaternion_rate_oracle(rng):
    """0.5 * q (x) (0, w) by explicit Hamilton product."""
    for _ in range(50):
        q = axis_angle_to_quat(rng.normal(size=3), rng.uniform(0, 3))
        w = rng.normal(size=3)
        a0, av = q[0], q[1:]
        prod = np.concatenate([[-av @ w], a0 * w + np.cross(av, w)])
        d = quad_derivative(make_state(q=q, w=w), np.zeros(4), P)
        assert np.allclose(d[6:10], 0.5 * prod, atol=1e-14)


def test_derivative_is_linear_in_thrust(rng):
    zero_g = QuadParams(g=0.0)
    for _ in range(20):
        x = make_state(q=axis_angle_to_quat(rng.normal(size=3), 0.5))
        u = rng.uniform(0, P.f_max, 4)
        a = rng.uniform(0, 1)
        d1 = quad_derivative(x, u, zero_g)[3:6]
        da = quad_derivative(x, a * u, zero_g)[3:6]
        assert np.allclose(da, a * d1, atol=1e-14)
        f, _ = mixer(u, zero_g)
        assert np.allclose(d1, f / zero_g.m * quat_to_rotmat(x[6:10])[:, 2], atol=1e-14)


def test_numba_dynamics_matches_reference(rng):
    J = P.inertia
    for _ in range(20):
        x = make_state(p=rng.normal(size=3), v=rng.normal(size=3),
                       q=axis_angle_to_quat(rng.normal(size=3), 1.0), w=rng.normal(size=3))
        u = rng.uniform(0, P.f_max, 4)
        ref = quad_derivative(x, u, P)
        got = K.dynamics(x, u, P.m, P.g, J, np.linalg.inv(J), P.allocation)
        assert np.allclose(got, ref, atol=1e-12)


def test_hover_equilibrium_over_1000_steps():
    x0 = hover_state([0.5, -1.0, 2.0])
    x = x0
    for _ in range(1000):
        x = integrate_quad(x, [P.hover_thrust] * 4, 0.01, 1, P)
    assert np.max(np.abs(x - x0)) < 1e-9


def test_ballistic_drop_matches_closed_form():
    x = integrate_quad(hover_state(np.zeros(3)), np.zeros(4), 1.0, 10000, P)
    assert x[5] == pytest.approx(-P.g, abs=1e-6)
    h = 1.0 / 10000
    # explicit Euler gives z = -g h^2 n(n-1)/2, off by g h / 2 from the exact -g/2
    assert x[2] == pytest.approx(-P.g / 2, abs=P.g * h)
    assert x[2] == pytest.approx(-P.g * h * h * 10000 * 9999 / 2, abs=1e-9)


def test_euler_drift_shrinks_linearly_with_step():
    """Energy error of free flight after 1 s roughly halves when dt halves."""
    def energy_error(dt):
        x = make_state(v=[1.0, 0.0, 3.0])
        e0 = 0.5 * x[3:6] @ x[3:6] + P.g * x[2]
        x = integrate_quad(x, np.zeros(4), 1.0, int(round(1.0 / dt)), P)
        return abs(0.5 * x[3:6] @ x[3:6] + P.g * x[2] - e0)

    e1, e2 = energy_error(0.01), energy_error(0.005)
    # explicit Euler lags the exact height by g t h / 2, hence an energy error of g^2 t h / 2
    assert e1 == pytest.approx(P.g**2 * 0.01 / 2, rel=1e-6)
    assert e1 / e2 == pytest.approx(2.0, rel=0.05)


def test_quaternion_norm_after_every_step(rng):
    x = make_state(q=axis_angle_to_quat([1, 2, 3], 0.4), w=[3.0, -2.0, 5.0])
    for _ in range(500):
        x = integrate_quad(x, rng.uniform(0, P.f_max, 4), 0.01, 1, P)
        assert abs(np.linalg.norm(x[6:10]) - 1.0) < 1e-12


def test_angular_momentum_about_principal_axis():
    x = make_state(w=[0.0, 0.0, 2.0])
    u = [P.hover_thrust] * 4  # zero torque
    for _ in range(200):
        x = integrate_quad(x, u, 0.01, 1, P)
    assert np.allclose(P.inertia @ x[10:13], P.inertia @ [0, 0, 2.0], atol=1e-12)


def test_integrate_rejects_bad_step_and_nonfinite():
    x = hover_state(np.zeros(3))
    with pytest.raises(ValueError):
        integrate_quad(x, np.zeros(4), 0.0, 1, P)
    bad = x.copy()
    bad[3] = np.inf
    with pytest.raises(NonFinite):
        integrate_quad(bad, np.zeros(4), 0.01, 1, P)


def test_quad_state_round_trip():
    x = make_state(p=[1, 2, 3], v=[4, 5, 6], q=[1, 0, 0, 0], w=[7, 8, 9])
    assert np.array_equal(QuadState.from_array(x).to_array(), x)


def test_gate_state_examples():
    g = GateMotion(p_g0=np.array([1.0, 2.0, 3.0]), theta_g0=0.3, v_g=np.array([1.0, 0.0, 0.0]), omega_g=np.pi / 2)
    p, th = gate_state_at(g, 0.0)
    assert np.array_equal(p, [1, 2, 3]) and th == 0.3
    p, _ = gate_state_at(g, 2.0)
    assert np.allclose(p, [3, 2, 3])
    _, th = gate_state_at(g, 1.0)
    assert th == pytest.approx(0.3 + np.pi / 2)


@given(st.floats(0, 10), st.floats(0, 10))
def test_gate_state_is_affine(t1, t2):
    g = GateMotion(p_g0=np.array([0.5, -1.0, 0.0]), theta_g0=0.2, v_g=np.array([-1.0, 0.3, 0.4]), omega_g=1.3)
    pa, ta = gate_state_at(g, t1)
    pb, tb = gate_state_at(g, t2)
    pm, tm = gate_state_at(g, 0.5 * (t1 + t2))
    assert np.allclose(pm, 0.5 * (pa + pb), atol=1e-12)
    assert tm == pytest.approx(0.5 * (ta + tb), abs=1e-12)
