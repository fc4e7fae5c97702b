"""Discrete kinematic bicycle model: rollout, analytic jacobians, inversion.

The step update is explicit Euler with the previous state's speed and heading
on the right-hand side:

    x_t   = x_{t-1} + v_{t-1} cos(phi_{t-1}) dt
    y_t   = y_{t-1} + v_{t-1} sin(phi_{t-1}) dt
    phi_t = phi_{t-1} + v_{t-1} tan(delta_{t-1}) / L dt
    v_t   = v_{t-1} + a_{t-1} dt

Gradients are closed-form recursions rather than tape autodiff so the module
stays framework-free and checkable against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Control, Trajectory, VehicleState, wrap_angle


class KinematicsError(ValueError):
    """Raised for inadmissible controls or infeasible state sequences."""


@dataclass(frozen=True)
class RolloutResult:
    """States of a control rollout plus per-step partial derivatives.

    state_jacobians[t][s] is d(states[t]) / d(controls[s]) as a (4, 2) block,
    zero for s >= t (causality). init_jacobians[t] is d(states[t]) / d(start)
    as a (4, 4) block.
    """

    states: Trajectory
    state_jacobians: np.ndarray  # (T, T-1, 4, 2); row t, column s
    init_jacobians: np.ndarray  # (T, 4, 4)

    def control_gradient(self, state_grads: np.ndarray) -> np.ndarray:
        """Pull per-state loss gradients back onto the controls.

        state_grads has shape (T, 4) aligned with states (entry 0 is ignored
        by causality). Returns (T-1, 2).
        """
        g = np.asarray(state_grads, dtype=float)
        if g.shape != (len(self.states.states), 4):
            raise ValueError(f"state_grads shape {g.shape} mismatches rollout")
        # dL/dc_s = sum_t dL/ds_t @ J[t, s]
        return np.einsum("tk,tskc->sc", g, self.state_jacobians)


def step(state: VehicleState, control: Control, dt: float, wheelbase: float) -> VehicleState:
    """Advance one interval of the discrete bicycle model."""
    if dt <= 0:
        raise KinematicsError("dt must be positive")
    if wheelbase <= 0:
        raise KinematicsError("wheelbase must be positive")
    if abs(control.steer) >= math.pi / 2:
        raise KinematicsError(f"steer {control.steer} at or beyond tan singularity")
    x = state.x + state.speed * math.cos(state.heading) * dt
    y = state.y + state.speed * math.sin(state.heading) * dt
    heading = state.heading + state.speed * math.tan(control.steer) / wheelbase * dt
    speed = state.speed + control.accel * dt
    if speed < 0:
        raise KinematicsError(
            f"accel {control.accel} drives speed negative ({speed:.6f}) at dt={dt}")
    return VehicleState(x, y, heading, speed)


def _step_jacobians(state: VehicleState, control: Control, dt: float,
                    wheelbase: float) -> tuple[np.ndarray, np.ndarray]:
    """(A, B) partials of the step output w.r.t. previous state and control."""
    c, s = math.cos(state.heading), math.sin(state.heading)
    v = state.speed
    tan_d = math.tan(control.steer)
    A = np.array([
        [1.0, 0.0, -v * s * dt, c * dt],
        [0.0, 1.0, v * c * dt, s * dt],
        [0.0, 0.0, 1.0, tan_d / wheelbase * dt],
        [0.0, 0.0, 0.0, 1.0],
    ])
    sec2 = 1.0 + tan_d * tan_d
    B = np.array([
        [0.0, 0.0],
        [0.0, 0.0],
        [v * sec2 / wheelbase * dt, 0.0],
        [0.0, dt],
    ])
    return A, B


def rollout(start: VehicleState, controls: Sequence[Control], dt: float,
            wheelbase: float) -> RolloutResult:
    """Roll controls forward from a start state, accumulating jacobians."""
    controls = list(controls)
    if not controls:
        raise KinematicsError("controls must be nonempty")
    n = len(controls)
    states = [start]
    jac = np.zeros((n + 1, n, 4, 2))
    init = np.zeros((n + 1, 4, 4))
    init[0] = np.eye(4)
    for t, ctrl in enumerate(controls):
        try:
            nxt = step(states[t], ctrl, dt, wheelbase)
        except KinematicsError as e:
            raise KinematicsError(f"step {t}: {e}") from e
        A, B = _step_jacobians(states[t], ctrl, dt, wheelbase)
        # J[t+1, s] = A @ J[t, s] for s < t, plus the fresh B at s = t.
        jac[t + 1, :t] = np.einsum("ij,sjc->sic", A, jac[t, :t])
        jac[t + 1, t] = B
        init[t + 1] = A @ init[t]
        states.append(nxt)
    traj = Trajectory(dt=dt, states=tuple(states), controls=tuple(controls))
    return RolloutResult(states=traj, state_jacobians=jac, init_jacobians=init)


def controls_from_states(traj: Trajectory, wheelbase: float) -> tuple[Control, ...]:
    """Invert the step update: recover (steer, accel) from consecutive states.

    Exact for step-feasible trajectories; reports pairs that no admissible
    control can connect (stationary state asked to turn).
    """
    if len(traj.states) < 2:
        raise KinematicsError("need at least two states")
    out = []
    for t in range(len(traj.states) - 1):
        a_state, b_state = traj.states[t], traj.states[t + 1]
        if a_state.speed < 0 or b_state.speed < 0:
            raise KinematicsError(f"negative speed at index {t}")
        accel = (b_state.speed - a_state.speed) / traj.dt
        dphi = wrap_angle(b_state.heading - a_state.heading)
        if a_state.speed * traj.dt < 1e-12:
            if abs(dphi) > 1e-9:
                raise KinematicsError(
                    f"index {t}: heading change {dphi:.6f} from standstill is infeasible")
            steer = 0.0
        else:
            steer = math.atan2(dphi * wheelbase, a_state.speed * traj.dt)
            if abs(steer) >= math.pi / 2:
                raise KinematicsError(f"index {t}: required steer {steer} at tan singularity")
        out.append(Control(steer=steer, accel=accel))
    return tuple(out)


def states_from_positions(positions: np.ndarray, dt: float,
                          final_heading: float | None = None,
                          final_speed: float | None = None) -> Trajectory:
    """Project a position polyline onto the exactly step-feasible manifold.

    Under the step update the chord from state t to t+1 has direction
    phi_t and length v_t dt, so chord directions/lengths define a state
    sequence whose rollout reproduces the positions to machine precision.
    The last state's heading/speed are free; they default to the last
    chord's.
    """
    p = np.asarray(positions, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 2:
        raise KinematicsError("positions must be (T, 2) with T >= 2")
    chords = np.diff(p, axis=0)
    lens = np.hypot(chords[:, 0], chords[:, 1])
    headings = np.arctan2(chords[:, 1], chords[:, 0])
    # Zero-length chords have no direction; reuse the previous/next heading.
    for t in range(len(headings)):
        if lens[t] < 1e-12:
            if t > 0:
                headings[t] = headings[t - 1]
            else:
                nz = np.nonzero(lens >= 1e-12)[0]
                headings[t] = headings[nz[0]] if len(nz) else 0.0
    speeds = lens / dt
    states = [VehicleState(p[t, 0], p[t, 1], headings[t], speeds[t])
              for t in range(len(p) - 1)]
    fh = headings[-1] if final_heading is None else final_heading
    fv = speeds[-1] if final_speed is None else final_speed
    if fv < 0:
        raise KinematicsError("final speed must be nonnegative")
    states.append(VehicleState(p[-1, 0], p[-1, 1], fh, fv))
    return Trajectory(dt=dt, states=tuple(states))


def feasible_trajectory(positions: np.ndarray, dt: float, wheelbase: float,
                        final_heading: float | None = None,
                        final_speed: float | None = None) -> Trajectory:
    """states_from_positions plus control labels for the given wheelbase."""
    traj = states_from_positions(positions, dt, final_heading, final_speed)
    controls = controls_from_states(traj, wheelbase)
    return Trajectory(dt=dt, states=traj.states, controls=controls)


def track_positions(start: VehicleState, targets: np.ndarray, n_steps: int,
                    dt: float, wheelbase: float, steer_max: float = 0.52,
                    accel_max: float = 4.0) -> Trajectory:
    """Roll controls that chase a target polyline from the true start state.

    The step update fixes the next position from the current state, so each
    control is chosen by one-step lookahead: aim heading/speed at the target
    after next. The result is exactly step-feasible (it is a rollout) and
    tracks the targets with a one-interval lag. targets needs n_steps + 2
    points (one beyond the horizon for the final lookahead); targets[0] is
    nominally the start position and is ignored.
    """
    tgt = np.asarray(targets, dtype=float)
    if n_steps < 1:
        raise KinematicsError("need at least one step")
    if len(tgt) < n_steps + 2:
        raise KinematicsError(f"need {n_steps + 2} targets, got {len(tgt)}")
    state = start
    states = [start]
    controls = []
    for t in range(n_steps):
        # position after this step is already determined by the current state
        p_next = np.array([state.x + state.speed * math.cos(state.heading) * dt,
                           state.y + state.speed * math.sin(state.heading) * dt])
        chord = tgt[t + 2] - p_next
        dist = float(np.hypot(chord[0], chord[1]))
        v_des = dist / dt
        steer = 0.0
        if state.speed * dt > 1e-9 and dist > 1e-9:
            phi_des = math.atan2(chord[1], chord[0])
            dphi = wrap_angle(phi_des - state.heading)
            if abs(dphi) > math.pi / 2:
                # target behind the vehicle; no reverse gear, so brake
                v_des = 0.0
            else:
                steer = math.atan2(dphi * wheelbase, state.speed * dt)
        steer = float(np.clip(steer, -steer_max, steer_max))
        accel = (v_des - state.speed) / dt
        accel = float(np.clip(accel, -min(accel_max, state.speed / dt), accel_max))
        ctrl = Control(steer=steer, accel=accel)
        state = step(state, ctrl, dt, wheelbase)
        states.append(state)
        controls.append(ctrl)
    return Trajectory(dt=dt, states=tuple(states), controls=tuple(controls))
