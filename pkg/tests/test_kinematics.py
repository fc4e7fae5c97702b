import math

import numpy as np
import pytest

from bevplan.core import Control, Trajectory, VehicleState
from bevplan.kinematics import (KinematicsError, controls_from_states,
                                feasible_trajectory, rollout, step,
                                states_from_positions)

L = 2.8
DT = 0.2


def scalar_step(state, control, dt, wheelbase):
    """Independent scalar evaluation of the update, kept deliberately dumb."""
    x, y, phi, v = state
    d, a = control
    return (x + v * math.cos(phi) * dt,
            y + v * math.sin(phi) * dt,
            phi + v * math.tan(d) / wheelbase * dt,
            v + a * dt)


def test_straight_step():
    out = step(VehicleState(0, 0, 0, 10), Control(0, 0), DT, L)
    assert (out.x, out.y, out.heading, out.speed) == pytest.approx((2, 0, 0, 10))


def test_accel_uses_previous_speed():
    out = step(VehicleState(0, 0, 0, 10), Control(0, 1), DT, L)
    assert out.x == pytest.approx(2.0)
    assert out.speed == pytest.approx(10.2)


def test_heading_update_value():
    out = step(VehicleState(0, 0, 0, 5), Control(0.1, 0), DT, L)
    assert out.heading == pytest.approx(5 * math.tan(0.1) / 2.8 * 0.2, abs=1e-12)
    assert out.heading == pytest.approx(0.0358338, abs=1e-6)


def test_steer_singularity_rejected():
    with pytest.raises(KinematicsError):
        step(VehicleState(0, 0, 0, 5), Control(math.pi / 2, 0), DT, L)


def test_rollout_vs_scalar_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        state = (rng.uniform(-5, 5), rng.uniform(-5, 5),
                 rng.uniform(-3, 3), rng.uniform(0.0, 15.0))
        n = rng.integers(1, 12)
        controls = [(rng.uniform(-0.5, 0.5), rng.uniform(-1, 1) * min(2.0, state[3] / DT if state[3] > 0 else 0.5))
                    for _ in range(n)]
        # guard against negative speeds in the oracle
        s = state
        ok = True
        for c in controls:
            s = scalar_step(s, c, DT, L)
            if s[3] < 0:
                ok = False
                break
        if not ok:
            continue
        res = rollout(VehicleState(*state), [Control(*c) for c in controls], DT, L)
        s = state
        for t, c in enumerate(controls):
            s = scalar_step(s, c, DT, L)
            got = res.states.states[t + 1].as_array()
            want = np.array(s)
            want[2] = math.atan2(math.sin(want[2]), math.cos(want[2]))
            worst = max(worst, np.max(np.abs(got - want)))
    assert worst < 1e-12


def test_straight_line_closed_form():
    res = rollout(VehicleState(0, 0, 0, 7.0), [Control(0, 0)] * 10, DT, L)
    for t, s in enumerate(res.states.states):
        assert s.x == pytest.approx(7.0 * t * DT, abs=1e-12)
        assert s.y == 0.0


def test_constant_steer_heading_closed_form():
    v, d = 5.0, 0.2
    res = rollout(VehicleState(0, 0, 0, v), [Control(d, 0)] * 8, DT, L)
    for k, s in enumerate(res.states.states):
        assert s.heading == pytest.approx(k * v * math.tan(d) / L * DT, abs=1e-12)


def _fd_jacobians(start, controls, dt, wheelbase, h=1e-6):
    n = len(controls)
    base = rollout(start, controls, dt, wheelbase).states.states_array()
    jac = np.zeros((n + 1, n, 4, 2))
    for s_idx in range(n):
        for c_idx in range(2):
            for sign in (+1, -1):
                pert = [Control(c.steer, c.accel) for c in controls]
                arr = pert[s_idx].as_array()
                arr[c_idx] += sign * h
                pert[s_idx] = Control(*arr)
                states = rollout(start, pert, dt, wheelbase).states.states_array()
                jac[:, s_idx, :, c_idx] += sign * states / (2 * h)
    return jac


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(100):
        start = VehicleState(rng.uniform(-2, 2), rng.uniform(-2, 2),
                             rng.uniform(-2, 2), rng.uniform(1.0, 12.0))
        n = int(rng.integers(2, 8))
        controls = [Control(rng.uniform(-0.4, 0.4), rng.uniform(-1.5, 1.5))
                    for _ in range(n)]
        try:
            res = rollout(start, controls, DT, L)
        except KinematicsError:
            continue
        fd = _fd_jacobians(start, controls, DT, L)
        scale = np.maximum(np.abs(fd), 1.0)
        rel = np.abs(res.state_jacobians - fd) / scale
        assert rel.max() < 1e-5


def test_jacobian_causality():
    res = rollout(VehicleState(0, 0, 0.3, 5), [Control(0.1, 0.5)] * 6, DT, L)
    for t in range(7):
        for s in range(6):
            if s >= t:
                assert np.all(res.state_jacobians[t, s] == 0.0)


def test_control_gradient_matches_manual_chain():
    res = rollout(VehicleState(0, 0, 0, 5), [Control(0.05, 0.4)] * 5, DT, L)
    g = np.random.default_rng(0).normal(size=(6, 4))
    got = res.control_gradient(g)
    want = np.zeros((5, 2))
    for t in range(6):
        for s in range(5):
            want[s] += g[t] @ res.state_jacobians[t, s]
    assert np.allclose(got, want, atol=1e-12)


def test_controls_round_trip():
    rng = np.random.default_rng(11)
    for _ in range(50):
        start = VehicleState(0, 0, rng.uniform(-3, 3), rng.uniform(0.5, 10))
        controls = [Control(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 1.0))
                    for _ in range(10)]
        try:
            res = rollout(start, controls, DT, L)
        except KinematicsError:
            continue
        rec = controls_from_states(res.states, L)
        got = np.array([c.as_array() for c in rec])
        want = np.array([c.as_array() for c in controls])
        assert np.max(np.abs(got - want)) < 1e-9


def test_controls_from_straight_line():
    states = tuple(VehicleState(i * 1.0, 0, 0, 5.0) for i in range(5))
    traj = Trajectory(dt=0.2, states=states)
    for c in controls_from_states(traj, L):
        assert c.steer == 0.0
        assert c.accel == 0.0


def test_controls_from_circle():
    R = 20.0
    delta = math.atan(L / R)
    # build by rolling out, then invert
    res = rollout(VehicleState(0, 0, 0, 5), [Control(delta, 0)] * 10, DT, L)
    rec = controls_from_states(res.states, L)
    for c in rec:
        assert c.steer == pytest.approx(delta, abs=1e-12)


def test_turn_from_standstill_reported():
    states = (VehicleState(0, 0, 0, 0), VehicleState(0, 0, 0.3, 0))
    with pytest.raises(KinematicsError):
        controls_from_states(Trajectory(dt=0.2, states=states), L)


def test_feasible_trajectory_reproduces_positions():
    rng = np.random.default_rng(5)
    pts = np.cumsum(rng.uniform(0.3, 1.5, size=(12, 2)), axis=0)
    traj = feasible_trajectory(pts, DT, L)
    res = rollout(traj.states[0], traj.controls, DT, L)
    assert np.max(np.abs(res.states.positions() - pts)) < 1e-9
    rec = controls_from_states(res.states, L)
    got = np.array([c.as_array() for c in rec])
    want = np.array([c.as_array() for c in traj.controls])
    assert np.max(np.abs(got - want)) < 1e-9


def test_states_from_positions_speed_sign():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    traj = states_from_positions(pts, 0.5)
    assert [s.speed for s in traj.states] == pytest.approx([2.0, 2.0, 2.0])
