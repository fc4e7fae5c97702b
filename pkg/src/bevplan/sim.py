"""Closed-loop evaluation: receding-horizon executor, rule checkers, the
scripted expert demonstrator, and demonstration dataset generation.

The executor re-plans every tick and executes exactly the first control
interval of each plan through the kinematic step. Obstacles follow their
scripted waypoints and never react. One rollout is strictly sequential;
distinct rollouts are independent.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from . import kinematics, postplan
from .augment import Sample
from .core import (Control, GridSpec, Trajectory, VehicleGeometry, VehicleState,
                   footprint_polygon, trajectory_to_ego_frame, wrap_angle)
from .scene import ChannelStack, TaskMasks, render_input, render_task_masks
from .world import ScenarioWorld

FAILURE_REASONS = ("collision", "off-road", "speeding", "traffic-light violation",
                   "non-arrival")


class PlannerError(RuntimeError):
    """A planner failed to produce a trajectory for a tick."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.2
    n_steps: int = 10  # planning horizon per tick
    grid: GridSpec = GridSpec()
    ego_geometry: VehicleGeometry = VehicleGeometry()
    history_window: float = 2.0
    speeding_margin: float = 0.5  # m/s over the limit
    speeding_ticks: int = 3  # consecutive ticks to flag
    sample_stride: int = 2  # demonstration sampling stride, in ticks
    max_speed_ref: float = 20.0


@dataclass
class TickRecord:
    time: float
    ego: VehicleState
    control: Control
    planned: Trajectory
    phases: dict
    fallback: bool = False


@dataclass
class RolloutLog:
    scenario: str
    dt: float
    records: list
    terminal_status: str  # arrived | timeout | collision | planner_error
    wall_time: float  # in-memory only; never serialized

    def states(self) -> list[VehicleState]:
        return [r.ego for r in self.records]


@dataclass(frozen=True)
class Verdict:
    passed: bool
    failure_reasons: tuple[str, ...]
    category: str

    def __post_init__(self):
        object.__setattr__(self, "failure_reasons", tuple(self.failure_reasons))
        if self.passed != (len(self.failure_reasons) == 0):
            raise ValueError("passed flag inconsistent with failure reasons")
        for r in self.failure_reasons:
            if r not in FAILURE_REASONS:
                raise ValueError(f"unknown failure reason {r!r}")


class PlanningContext:
    """Per-tick view handed to planners; renders lazily and memoizes."""

    def __init__(self, world: ScenarioWorld, now: float, ego: VehicleState,
                 cfg: SimConfig, history: Sequence):
        self.world = world
        self.now = now
        self.ego = ego
        self.cfg = cfg
        self.history = list(history)
        self._channels: Optional[ChannelStack] = None
        self._masks: Optional[TaskMasks] = None

    def channels(self) -> ChannelStack:
        if self._channels is None:
            self._channels = render_input(
                self.world, self.now, self.ego, self.cfg.grid,
                history_window=self.cfg.history_window,
                horizon=self.cfg.n_steps * self.cfg.dt, dt=self.cfg.dt,
                ego_history=self.history, ego_geometry=self.cfg.ego_geometry,
                max_speed_ref=self.cfg.max_speed_ref)
        return self._channels

    def masks(self) -> TaskMasks:
        if self._masks is None:
            self._masks = render_task_masks(
                self.world, self.now, self.cfg.grid, self.ego,
                horizon=self.cfg.n_steps * self.cfg.dt, dt=self.cfg.dt)
        return self._masks


class Planner(Protocol):
    name: str

    def plan(self, ctx: PlanningContext) -> Trajectory:
        """Return an (n_steps + 1)-state world-frame trajectory at ctx.cfg.dt."""


def obb_corners(state: VehicleState, geom_or_dims) -> np.ndarray:
    if isinstance(geom_or_dims, VehicleGeometry):
        return footprint_polygon(state, geom_or_dims)
    length, width = geom_or_dims
    geom = VehicleGeometry(length=length, width=width,
                           wheelbase=min(length, width) / 2)
    return footprint_polygon(state, geom)


def obb_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis overlap test for two (4, 2) oriented boxes."""
    for box in (a, b):
        for k in range(2):
            edge = box[(k + 1) % 4] - box[k]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _collides(world: ScenarioWorld, ego: VehicleState, t: float,
              geom: VehicleGeometry) -> bool:
    ego_box = footprint_polygon(ego, geom)
    for obs in world.obstacles:
        x, y, h = obs.pose_at(t)
        if math.hypot(x - ego.x, y - ego.y) > (obs.length + geom.length):
            continue
        if obb_overlap(ego_box, obb_corners(VehicleState(x, y, h, 0.0),
                                            (obs.length, obs.width))):
            return True
    return False


def run_closed_loop(planner: Planner, world: ScenarioWorld,
                    cfg: SimConfig = SimConfig()) -> RolloutLog:
    """Tick the world: render, plan, execute the first control interval."""
    t0 = _time.perf_counter()
    ego = world.ego_start
    t = 0.0
    history = [(0.0, ego)]
    records: list[TickRecord] = []
    status = "timeout"
    dest = np.array(world.destination)

    def arrived(s: VehicleState) -> bool:
        return math.hypot(s.x - dest[0], s.y - dest[1]) <= world.destination_radius

    if arrived(ego):
        status = "arrived"
    else:
        while t < world.time_budget - 1e-9:
            ctx = PlanningContext(world, t, ego, cfg, history)
            try:
                planned = planner.plan(ctx)
            except Exception:  # noqa: BLE001 - recorded as a truncated log
                status = "planner_error"
                break
            if planned.controls is not None:
                control = planned.controls[0]
            else:
                control = kinematics.controls_from_states(
                    Trajectory(dt=cfg.dt, states=planned.states[:2]),
                    cfg.ego_geometry.wheelbase)[0]
            diag = getattr(planner, "last_diagnostics", None)
            fallback = bool(diag.fallback) if diag is not None else False
            records.append(TickRecord(time=t, ego=ego, control=control,
                                      planned=planned,
                                      phases={s.id: s.phase_at(t) for s in world.signals},
                                      fallback=fallback))
            ego = kinematics.step(ego, control, cfg.dt, cfg.ego_geometry.wheelbase)
            t += cfg.dt
            history.append((t, ego))
            if _collides(world, ego, t, cfg.ego_geometry):
                status = "collision"
                break
            if arrived(ego):
                status = "arrived"
                break
    return RolloutLog(scenario=world.name, dt=cfg.dt, records=records,
                      terminal_status=status, wall_time=_time.perf_counter() - t0)


def _nearest_lane_limit(world: ScenarioWorld, p: np.ndarray) -> float:
    best, bv = math.inf, math.inf
    for ln in world.lanes:
        d = float(np.min(np.hypot(*(ln.centerline - p).T)))
        if d < best:
            best, bv = d, ln.speed_limit
    return bv


def _stop_line_crossing(world: ScenarioWorld, log: RolloutLog,
                        geom: VehicleGeometry) -> bool:
    if not world.signals or len(log.records) < 2:
        return False
    try:
        ref = postplan.ReferenceLine(world.route_reference())
    except Exception:
        return False
    route_set = set(world.route)
    for sig in world.signals:
        if not route_set.intersection(sig.controlled_lanes):
            continue
        s_stop, _ = ref.project(sig.stop_line.mean(axis=0))
        a, b = sig.stop_line
        ab = b - a
        ab_len2 = float(ab @ ab)
        prev_front = None
        for rec in log.records:
            corners = footprint_polygon(rec.ego, geom)
            front = corners[[0, 3]]  # front-left, front-right
            s_front = max(ref.project(c)[0] for c in front)
            # lateral containment within the stop-line extent
            within = False
            for c in front:
                u = float((c - a) @ ab) / ab_len2 if ab_len2 > 0 else 0.5
                if -0.1 <= u <= 1.1:
                    within = True
            crossed = prev_front is not None and prev_front <= s_stop < s_front
            if crossed and within and sig.phase_at(rec.time) == "red":
                return True
            prev_front = s_front
    return False


def check_rules(log: RolloutLog, world: ScenarioWorld,
                cfg: SimConfig = SimConfig()) -> Verdict:
    """Grade a complete rollout; all violations accumulate."""
    reasons: list[str] = []
    geom = cfg.ego_geometry

    if log.terminal_status == "collision":
        reasons.append("collision")
    else:
        for rec in log.records:
            if _collides(world, rec.ego, rec.time, geom):
                reasons.append("collision")
                break

    if world.drivable_area:
        from .rasterops import point_in_polygon
        off = False
        for rec in log.records:
            corners = footprint_polygon(rec.ego, geom)
            inside = np.zeros(4, dtype=bool)
            for poly in world.drivable_area:
                inside |= point_in_polygon(corners, poly)
                if inside.all():
                    break
            if not inside.all():
                off = True
                break
        if off:
            reasons.append("off-road")

    streak = 0
    speeding = False
    for rec in log.records:
        limit = _nearest_lane_limit(world, np.array([rec.ego.x, rec.ego.y]))
        if rec.ego.speed > limit + cfg.speeding_margin:
            streak += 1
            if streak >= cfg.speeding_ticks:
                speeding = True
                break
        else:
            streak = 0
    if speeding:
        reasons.append("speeding")

    if _stop_line_crossing(world, log, geom):
        reasons.append("traffic-light violation")

    if log.terminal_status != "arrived":
        reasons.append("non-arrival")

    return Verdict(passed=not reasons, failure_reasons=tuple(reasons),
                   category=world.category)


class ScriptedExpert:
    """Rule-based demonstrator: corridor centerline following with comfort
    speed control (leader headway, red-light stops, curvature slowdown)."""

    name = "scripted-expert"

    def __init__(self, world: ScenarioWorld, cfg: SimConfig = SimConfig(),
                 plan_cfg: postplan.PostplanConfig = postplan.PostplanConfig()):
        self.world = world
        self.cfg = cfg
        self.plan_cfg = plan_cfg
        self.ref = postplan.ReferenceLine(world.route_reference())
        self.last_diagnostics: Optional[postplan.GatekeepDiagnostics] = None

    def plan(self, ctx: PlanningContext) -> Trajectory:
        try:
            traj, diag = postplan.plan_in_corridor(
                self.world, ctx.ego, self.ref, lambda s: 0.0, ctx.now,
                self.cfg.n_steps, self.cfg.dt, cfg=self.plan_cfg,
                ego_geometry=self.cfg.ego_geometry)
            self.last_diagnostics = diag
            return traj
        except (postplan.CorridorError, postplan.QPError,
                kinematics.KinematicsError) as e:
            self.last_diagnostics = postplan.GatekeepDiagnostics(
                fallback=True, reason=str(e))
            return postplan.safe_stop(ctx.ego, self.cfg.n_steps, self.cfg.dt,
                                      self.plan_cfg,
                                      self.cfg.ego_geometry.wheelbase)


def scripted_expert(world: ScenarioWorld, cfg: SimConfig = SimConfig(),
                    plan_cfg: Optional[postplan.PostplanConfig] = None) -> ScriptedExpert:
    return ScriptedExpert(world, cfg, plan_cfg or postplan.PostplanConfig())


def expert_log_states(log: RolloutLog) -> np.ndarray:
    """(T, 4) executed expert states, one row per tick."""
    return np.array([r.ego.as_array() for r in log.records])


def generate_demonstrations(worlds: Sequence[ScenarioWorld],
                            cfg: SimConfig = SimConfig(),
                            plan_cfg: Optional[postplan.PostplanConfig] = None,
                            on_progress: Optional[Callable] = None,
                            sink: Optional[Callable] = None
                            ) -> tuple[list[Sample], dict, list[str], list]:
    """Run the expert on every scenario; emit per-tick training samples.

    Returns (samples, expert state tables per scenario, failed scenario
    names, expert rollout logs). Scenarios the expert cannot pass are
    excluded and reported. When sink is given, samples are streamed to it
    instead of collected (the returned list stays empty).
    """
    samples: list[Sample] = []
    expert_states: dict[str, np.ndarray] = {}
    failed: list[str] = []
    logs = []
    for world in worlds:
        expert = scripted_expert(world, cfg, plan_cfg)
        log = run_closed_loop(expert, world, cfg)
        verdict = check_rules(log, world, cfg)
        if not verdict.passed:
            failed.append(world.name)
            continue
        logs.append(log)
        expert_states[world.name] = expert_log_states(log)
        # executed controls per tick; labels are executed state windows
        n = cfg.n_steps
        recs = log.records
        for k in range(0, len(recs) - n, cfg.sample_stride):
            ego = recs[k].ego
            states = [recs[k + j].ego for j in range(n + 1)]
            controls = [recs[k + j].control for j in range(n)]
            label_world = Trajectory(dt=cfg.dt, states=tuple(states),
                                     controls=tuple(controls))
            label = trajectory_to_ego_frame(label_world, ego)
            history = [(r.time, r.ego) for r in recs[:k + 1]]
            ctx = PlanningContext(world, recs[k].time, ego, cfg, history)
            sample = Sample(
                scenario=world.name, timestamp=recs[k].time, provenance="original",
                channels=ctx.channels(), masks=ctx.masks(), v0=ego.speed,
                truth=label, ego_world=ego)
            if sink is not None:
                sink(sample)
            else:
                samples.append(sample)
        if on_progress is not None:
            on_progress(world.name, len(samples))
    return samples, expert_states, failed, logs
