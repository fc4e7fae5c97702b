"""Data synthesis: random lateral perturbation and on-policy feedback.

Both synthesizers output exactly step-feasible trajectories. A smooth
proposal curve (quintic bump over the original points, or a quintic
boundary-value rejoin) is projected onto the feasible manifold by a tracking
rollout, then a Gauss-Newton correction on the controls (using the analytic
rollout jacobians) pins the terminal state exactly. Proposals violating the
curvature/speed/accel limits are rejected, never repaired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .core import (Control, Trajectory, VehicleState, wrap_angle)
from .kinematics import (KinematicsError, controls_from_states, rollout,
                         track_positions)
from .scene import ChannelStack, TaskMasks

PROVENANCES = ("original", "random", "feedback")


@dataclass
class Sample:
    """One training frame: rendered inputs plus the ego-frame ground truth."""

    scenario: str
    timestamp: float
    provenance: str
    channels: ChannelStack
    masks: TaskMasks
    v0: float
    truth: Trajectory  # ego frame of this sample; states[0] == (0, 0, 0, v0)
    ego_world: VehicleState

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def key(self) -> tuple:
        return (self.scenario, round(self.timestamp, 6), self.provenance)


@dataclass(frozen=True)
class SynthesisConfig:
    max_lateral_offset: float = 2.0  # m
    curvature_max: float = 0.2  # 1/m
    feedback_T: int = 5  # policy steps before rejoining
    rejoin_horizon: int = 10  # steps back to the expert path
    iterations: int = 1  # feedback passes (K)
    seed: int = 0
    frame_stride: int = 8  # base-frame subsampling for synthesis
    emit_stride: int = 2  # tick gap between emitted feedback samples
    emit_cap: int = 3  # samples emitted per synthesized continuation
    speed_limit: float = 20.0
    accel_max: float = 4.0
    steer_max: float = 0.52

    def __post_init__(self):
        if self.feedback_T < 1 or self.rejoin_horizon < 1 or self.iterations < 1:
            raise ValueError("feedback_T, rejoin_horizon, iterations must be >= 1")
        if min(self.max_lateral_offset, self.curvature_max) < 0:
            raise ValueError("offsets and curvature bound must be nonnegative")
        if self.emit_cap * self.emit_stride > self.frame_stride:
            raise ValueError("emit_cap * emit_stride must not exceed frame_stride "
                             "(keeps sample keys unique)")


def quintic_bump_coeffs(tau_m: float) -> np.ndarray:
    """Quintic B with B(0)=B(1)=B'(0)=B'(1)=0, B(tau_m)=1, B'(tau_m)=0."""
    if not 0.0 < tau_m < 1.0:
        raise ValueError("bump location must be strictly interior")

    def rows(t):
        p = np.array([1.0, t, t ** 2, t ** 3, t ** 4, t ** 5])
        d = np.array([0.0, 1.0, 2 * t, 3 * t ** 2, 4 * t ** 3, 5 * t ** 4])
        return p, d

    p0, d0 = rows(0.0)
    p1, d1 = rows(1.0)
    pm, dm = rows(tau_m)
    A = np.stack([p0, d0, p1, d1, pm, dm])
    b = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    return np.linalg.solve(A, b)


def eval_poly(coeffs: np.ndarray, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for k, c in enumerate(coeffs):
        out = out + c * t ** k
    return out


def quintic_boundary_coeffs(x0, v0, x1, v1, T) -> np.ndarray:
    """Quintic with position/velocity pinned at both ends, zero end accel."""
    A = np.zeros((6, 6))
    b = np.array([x0, v0, 0.0, x1, v1, 0.0], dtype=float)
    for r, (t, order) in enumerate([(0.0, 0), (0.0, 1), (0.0, 2),
                                    (T, 0), (T, 1), (T, 2)]):
        for k in range(6):
            if k >= order:
                c = 1.0
                for j in range(order):
                    c *= (k - j)
                A[r, k] = c * t ** (k - order)
    return np.linalg.solve(A, b)


def poly_derivative(coeffs: np.ndarray) -> np.ndarray:
    return np.array([k * c for k, c in enumerate(coeffs)][1:])


def max_curvature_dense(x_of, y_of, t_lo: float, t_hi: float,
                        spacing: float = 0.1) -> float:
    """Max |curvature| of a parametric curve, sampled about every `spacing`
    meters of arc length (parameter grid refined from a coarse arc estimate)."""
    t = np.linspace(t_lo, t_hi, 64)
    x, y = x_of(t), y_of(t)
    arc = float(np.sum(np.hypot(np.diff(x), np.diff(y))))
    n = max(64, int(math.ceil(arc / spacing)) + 1)
    t = np.linspace(t_lo, t_hi, n)
    h = (t_hi - t_lo) / (n - 1)
    x, y = x_of(t), y_of(t)
    dx = np.gradient(x, h)
    dy = np.gradient(y, h)
    ddx = np.gradient(dx, h)
    ddy = np.gradient(dy, h)
    denom = (dx * dx + dy * dy) ** 1.5
    denom = np.where(denom < 1e-12, np.inf, denom)
    kappa = np.abs(dx * ddy - dy * ddx) / denom
    return float(kappa.max())


def one_step_ahead(state: VehicleState, dt: float) -> np.ndarray:
    """Position the state reaches after one step (controls cannot change it)."""
    return np.array([state.x + state.speed * math.cos(state.heading) * dt,
                     state.y + state.speed * math.sin(state.heading) * dt])


def refine_to_endpoint(start: VehicleState, controls: Sequence[Control],
                       target: VehicleState, dt: float, wheelbase: float,
                       tol: float = 1e-10, max_iter: int = 12
                       ) -> Optional[Trajectory]:
    """Least-norm control correction driving the rollout end onto target."""
    ctrl = np.array([c.as_array() for c in controls], dtype=float)
    n = len(ctrl)
    tgt = target.as_array()
    for _ in range(max_iter):
        try:
            res = rollout(start, [Control(*c) for c in ctrl], dt, wheelbase)
        except KinematicsError:
            return None
        end = res.states.states[-1].as_array()
        err = tgt - end
        err[2] = wrap_angle(err[2])
        if float(np.max(np.abs(err))) <= tol:
            return res.states
        J = np.transpose(res.state_jacobians[-1], (1, 0, 2)).reshape(4, 2 * n)
        delta, *_ = np.linalg.lstsq(J, err, rcond=None)
        ctrl = ctrl + delta.reshape(n, 2)
    return None


def _project_with_endpoint(start: VehicleState, targets: np.ndarray,
                           n_steps: int, end_state: VehicleState, dt: float,
                           wheelbase: float, cfg: SynthesisConfig
                           ) -> Optional[Trajectory]:
    """Tracking rollout through targets, then exact terminal matching."""
    try:
        tracked = track_positions(start, targets, n_steps, dt, wheelbase,
                                  steer_max=min(cfg.steer_max * 1.5, 1.4),
                                  accel_max=cfg.accel_max * 1.5)
    except KinematicsError:
        return None
    refined = refine_to_endpoint(start, tracked.controls, end_state, dt, wheelbase)
    if refined is None:
        return None
    controls = controls_from_states(refined, wheelbase)
    return Trajectory(dt=dt, states=refined.states, controls=controls)


def _trajectory_ok(traj: Trajectory, cfg: SynthesisConfig, wheelbase: float,
                   curvature_slack: float = 1.10) -> bool:
    for c in traj.controls or ():
        if abs(math.tan(c.steer)) / wheelbase > cfg.curvature_max * curvature_slack:
            return False
        if abs(c.accel) > cfg.accel_max + 1e-9:
            return False
    return all(0.0 <= s.speed <= cfg.speed_limit + 1e-9 for s in traj.states)


def random_perturb(truth: Trajectory, cfg: SynthesisConfig,
                   rng: np.random.Generator,
                   wheelbase: float = 2.8) -> Optional[Trajectory]:
    """Displace one interior point laterally under a quintic bump profile.

    The start and end states are anchored exactly; the proposal is rejected
    when its dense-sampled curvature exceeds the bound.
    """
    traj, _, _ = random_perturb_detailed(truth, cfg, rng, wheelbase)
    return traj


def random_perturb_detailed(truth: Trajectory, cfg: SynthesisConfig,
                            rng: np.random.Generator, wheelbase: float = 2.8
                            ) -> tuple[Optional[Trajectory], int, float]:
    """random_perturb plus the drawn (index, offset) for dataset framing."""
    n_pts = len(truth.states)
    if n_pts < 3:
        raise ValueError("need at least 3 states to perturb")
    pts = truth.positions()
    m = int(rng.integers(1, n_pts - 1))
    offset = float(rng.uniform(-cfg.max_lateral_offset, cfg.max_lateral_offset))
    heading_m = truth.states[m].heading
    normal = np.array([-math.sin(heading_m), math.cos(heading_m)])
    tau = np.arange(n_pts, dtype=float) / (n_pts - 1)
    bump = eval_poly(quintic_bump_coeffs(tau[m]), tau)
    perturbed = pts + offset * bump[:, None] * normal[None, :]

    # curvature gate on the smooth interpolant through the perturbed points
    u = np.arange(n_pts, dtype=float)
    sx = CubicSpline(u, perturbed[:, 0])
    sy = CubicSpline(u, perturbed[:, 1])
    if max_curvature_dense(sx, sy, 0.0, float(n_pts - 1)) > cfg.curvature_max:
        return None, m, offset

    # final lookahead aims where the anchored terminal state travels next
    targets = np.vstack([perturbed, one_step_ahead(truth.states[-1], truth.dt)])
    traj = _project_with_endpoint(truth.states[0], targets, n_pts - 1,
                                  truth.states[-1], truth.dt, wheelbase, cfg)
    if traj is None or not _trajectory_ok(traj, cfg, wheelbase):
        return None, m, offset
    return traj, m, offset


def smooth_rejoin(deviated: VehicleState, expert: Trajectory,
                  rejoin_horizon: int, cfg: SynthesisConfig,
                  wheelbase: float = 2.8) -> Optional[Trajectory]:
    """Quintic boundary-value rejoin from a deviated state onto the expert.

    expert's index 0 is aligned with the deviated state's time; the rejoin
    target is expert.states[rejoin_horizon]. Returns the step-feasible rejoin
    trajectory (rejoin_horizon steps), or None when constraints cannot be met.
    """
    if rejoin_horizon >= len(expert.states):
        return None
    target = expert.states[rejoin_horizon]
    dt = expert.dt
    T = rejoin_horizon * dt
    cx = quintic_boundary_coeffs(deviated.x, deviated.speed * math.cos(deviated.heading),
                                 target.x, target.speed * math.cos(target.heading), T)
    cy = quintic_boundary_coeffs(deviated.y, deviated.speed * math.sin(deviated.heading),
                                 target.y, target.speed * math.sin(target.heading), T)

    def x_of(t):
        return eval_poly(cx, t)

    def y_of(t):
        return eval_poly(cy, t)

    if max_curvature_dense(x_of, y_of, 0.0, T) > cfg.curvature_max:
        return None
    # speed/accel gates on the dense curve
    tt = np.linspace(0.0, T, max(32, rejoin_horizon * 8))
    dxc, dyc = poly_derivative(cx), poly_derivative(cy)
    vx, vy = eval_poly(dxc, tt), eval_poly(dyc, tt)
    speed = np.hypot(vx, vy)
    if speed.min() < -1e-9 or speed.max() > cfg.speed_limit + 1e-9:
        return None
    accel = np.gradient(speed, tt[1] - tt[0])
    if np.max(np.abs(accel)) > cfg.accel_max + 1e-9:
        return None

    ts = np.arange(rejoin_horizon + 1) * dt
    pts = np.stack([x_of(ts), y_of(ts)], axis=-1)
    targets = np.vstack([pts, one_step_ahead(target, dt)])
    traj = _project_with_endpoint(deviated, targets, rejoin_horizon, target,
                                  dt, wheelbase, cfg)
    if traj is None or not _trajectory_ok(traj, cfg, wheelbase):
        return None
    return traj


@dataclass
class SynthesisReport:
    attempted: int = 0
    emitted: int = 0
    skipped_solver: int = 0
    skipped_duplicate: int = 0

    @property
    def skip_rate(self) -> float:
        return 0.0 if self.attempted == 0 else 1.0 - self.emitted / max(
            1, self.attempted)


def feedback_rollout(policy_fn: Callable, world, start: VehicleState, t0: float,
                     T: int, sim_cfg, history: Sequence) -> list[VehicleState]:
    """Roll the policy closed-loop for T steps from a frame's start state."""
    from .scene import render_input  # local import keeps module deps one-way
    state = start
    t = t0
    hist = list(history)
    visited = [start]
    for _ in range(T):
        stack = render_input(world, t, state, sim_cfg.grid,
                             history_window=sim_cfg.history_window,
                             horizon=sim_cfg.n_steps * sim_cfg.dt, dt=sim_cfg.dt,
                             ego_history=hist, ego_geometry=sim_cfg.ego_geometry,
                             max_speed_ref=sim_cfg.max_speed_ref)
        plan = policy_fn(stack, state.speed)  # ego-frame trajectory
        from .core import trajectory_from_ego_frame
        plan_world = trajectory_from_ego_frame(plan, state)
        ctrl = plan_world.controls[0]
        from .kinematics import step
        state = step(state, ctrl, sim_cfg.dt, sim_cfg.ego_geometry.wheelbase)
        t += sim_cfg.dt
        hist.append((t, state))
        visited.append(state)
    return visited


def feedback_synthesize(policy_fn: Callable, base: Sequence[Sample],
                        worlds: dict, expert_states: dict,
                        cfg: SynthesisConfig, sim_cfg
                        ) -> tuple[list[Sample], SynthesisReport]:
    """DAgger-style synthesis: visit states under the current policy, then
    label them by smoothing back onto the expert path.

    policy_fn(ChannelStack, v0) -> ego-frame Trajectory with controls.
    worlds maps scenario name -> ScenarioWorld; expert_states maps scenario
    name -> (T, 4) executed expert state table at the sim tick rate.
    """
    from .core import to_ego_frame, trajectory_to_ego_frame
    from .scene import render_input, render_task_masks

    report = SynthesisReport()
    out: list[Sample] = []
    seen_keys = set()
    dt = sim_cfg.dt
    wheelbase = sim_cfg.ego_geometry.wheelbase
    for idx in range(0, len(base), cfg.frame_stride):
        sample = base[idx]
        world = worlds[sample.scenario]
        table = expert_states[sample.scenario]
        k0 = int(round(sample.timestamp / dt))
        k_dev = k0 + cfg.feedback_T
        k_target = k_dev + cfg.rejoin_horizon
        if k_target + 1 >= len(table):
            continue
        report.attempted += 1

        history = [(j * dt, VehicleState.from_array(table[j]))
                   for j in range(0, k0 + 1)]
        visited = feedback_rollout(policy_fn, world, sample.ego_world,
                                   sample.timestamp, cfg.feedback_T, sim_cfg,
                                   history)
        deviated = visited[-1]
        expert_cont = Trajectory(dt=dt, states=tuple(
            VehicleState.from_array(row) for row in table[k_dev:]))
        rejoin = smooth_rejoin(deviated, expert_cont, cfg.rejoin_horizon, cfg,
                               wheelbase)
        if rejoin is None:
            report.skipped_solver += 1
            continue

        # demonstrated continuation: rejoin path then the expert suffix
        cont_states = list(rejoin.states) + [
            VehicleState.from_array(row) for row in table[k_target + 1:]]
        cont = Trajectory(dt=dt, states=tuple(cont_states))
        full_history = history + [((k0 + 1 + j) * dt, s)
                                  for j, s in enumerate(visited[1:])]
        n = sim_cfg.n_steps
        emitted_here = 0
        for j in range(0, cfg.emit_cap * cfg.emit_stride, cfg.emit_stride):
            if j + n + 1 > len(cont_states):
                break
            state_j = cont_states[j]
            t_j = (k_dev + j) * dt
            key = (sample.scenario, round(t_j, 6), "feedback")
            if key in seen_keys:
                report.skipped_duplicate += 1
                continue
            window = Trajectory(dt=dt, states=tuple(cont_states[j:j + n + 1]))
            try:
                controls = controls_from_states(window, wheelbase)
            except KinematicsError:
                report.skipped_solver += 1
                continue
            window = Trajectory(dt=dt, states=window.states, controls=controls)
            hist_j = full_history + [((k_dev + i) * dt, s)
                                     for i, s in enumerate(cont_states[1:j + 1], start=1)]
            stack = render_input(world, t_j, state_j, sim_cfg.grid,
                                 history_window=sim_cfg.history_window,
                                 horizon=n * dt, dt=dt, ego_history=hist_j,
                                 ego_geometry=sim_cfg.ego_geometry,
                                 max_speed_ref=sim_cfg.max_speed_ref)
            masks = render_task_masks(world, t_j, sim_cfg.grid, state_j,
                                      horizon=n * dt, dt=dt)
            seen_keys.add(key)
            out.append(Sample(scenario=sample.scenario, timestamp=t_j,
                              provenance="feedback", channels=stack, masks=masks,
                              v0=state_j.speed,
                              truth=trajectory_to_ego_frame(window, state_j),
                              ego_world=state_j))
            emitted_here += 1
        report.emitted += 1 if emitted_here else 0
    return out, report


def aggregate(datasets: Sequence[Sequence[Sample]]) -> list[Sample]:
    """Concatenate sample collections; duplicate keys are an error.

    Output order is deterministic: (scenario, timestamp, provenance).
    """
    merged: list[Sample] = []
    seen = set()
    for ds in datasets:
        for s in ds:
            if s.key in seen:
                raise ValueError(f"duplicate sample key {s.key}")
            seen.add(s.key)
            merged.append(s)
    order = {p: i for i, p in enumerate(PROVENANCES)}
    merged.sort(key=lambda s: (s.scenario, s.timestamp, order[s.provenance]))
    return merged
