"""Ego-centric BEV channel rendering and task-mask rendering.

Rendering is deterministic and purely functional over an immutable world:
identical (world, now, ego, grid) inputs produce bit-identical images.
Brightness encodings:
  - ego history points and obstacle history boxes fade linearly, oldest
    darkest;
  - predicted obstacle boxes fade linearly the other way, furthest in time
    brightest;
  - the routing channel is constant full intensity on route lanes;
  - the speed-limit channel encodes limit / max_speed_ref;
  - traffic-light channels color controlled lanes by a fixed phase table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rasterops
from .core import (GridSpec, VehicleGeometry, VehicleState, footprint_polygon,
                   world_to_image)
from .world import ScenarioWorld

CHANNEL_NAMES = (
    "agent_box",
    "past_agent_poses",
    "obstacle_prediction",
    "obstacle_history",
    "road_surface",
    "road_boundary",
    "road_junction",
    "routing",
    "speed_limit",
    "traffic_lights",
)

PHASE_LEVELS = {"red": 1.0, "yellow": 0.6, "green": 0.3, "unknown": 0.0}

DEFAULT_MAX_SPEED_REF = 20.0  # m/s, normalizes the speed-limit channel
DEFAULT_SIGNAL_ZONE_DEPTH = 20.0  # m of forbidden cells beyond a red stop line
DEFAULT_EGO_GEOMETRY = VehicleGeometry()


@dataclass(frozen=True)
class ChannelStack:
    """Named float32 images in [0, 1] sharing one grid."""

    grid: GridSpec
    channels: dict

    def __post_init__(self):
        for name in CHANNEL_NAMES:
            if name not in self.channels:
                raise ValueError(f"missing channel {name}")
            img = self.channels[name]
            if img.shape != self.grid.shape:
                raise ValueError(f"channel {name} shape {img.shape} != grid {self.grid.shape}")

    def tensor(self) -> np.ndarray:
        """(C, H, W) float32 array in the canonical channel order."""
        return np.stack([self.channels[n] for n in CHANNEL_NAMES]).astype(np.float32)

    @staticmethod
    def from_tensor(grid: GridSpec, arr: np.ndarray) -> "ChannelStack":
        if arr.shape != (len(CHANNEL_NAMES),) + grid.shape:
            raise ValueError(f"tensor shape {arr.shape} mismatches grid")
        return ChannelStack(grid=grid, channels={n: arr[k] for k, n in enumerate(CHANNEL_NAMES)})


@dataclass(frozen=True)
class TaskMasks:
    """Binary forbidden-cell masks for the four task losses."""

    obstacle: np.ndarray
    route: np.ndarray
    road: np.ndarray
    signal: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.obstacle, self.route, self.road, self.signal])

    @staticmethod
    def from_stack(arr: np.ndarray) -> "TaskMasks":
        return TaskMasks(obstacle=arr[0], route=arr[1], road=arr[2], signal=arr[3])


def phase_level(phase: str) -> float:
    """Grey level for a signal phase; rejects unknown enum values."""
    try:
        return PHASE_LEVELS[phase]
    except KeyError:
        raise ValueError(f"unknown signal phase {phase!r}") from None


def _to_px(points, ego: VehicleState, grid: GridSpec) -> np.ndarray:
    return world_to_image(np.asarray(points, dtype=float), ego, grid)


def _ego_history_pose(ego_history, t: float, ego: VehicleState) -> tuple[float, float]:
    """Ego position at time t from a [(time, VehicleState)] log (clamped).

    Without a log the ego is assumed to have been parked at its current
    pose.
    """
    if not ego_history:
        return (ego.x, ego.y)
    times = [e[0] for e in ego_history]
    if t <= times[0]:
        s = ego_history[0][1]
        return (s.x, s.y)
    if t >= times[-1]:
        s = ego_history[-1][1]
        return (s.x, s.y)
    k = int(np.searchsorted(times, t, side="right")) - 1
    t0, t1 = times[k], times[k + 1]
    u = (t - t0) / (t1 - t0)
    a, b = ego_history[k][1], ego_history[k + 1][1]
    return (a.x + u * (b.x - a.x), a.y + u * (b.y - a.y))


def _obstacle_near(world: ScenarioWorld, obs, ego: VehicleState, grid: GridSpec,
                   t_lo: float, t_hi: float) -> bool:
    reach = 0.5 * math.hypot(grid.width_px, grid.height_px) * grid.resolution
    reach += max(obs.length, obs.width)
    for t in (t_lo, t_hi):
        x, y, _ = obs.pose_at(t)
        if math.hypot(x - ego.x, y - ego.y) <= reach:
            return True
    return False


def _obstacle_box_px(obs, t: float, ego: VehicleState, grid: GridSpec) -> np.ndarray:
    x, y, h = obs.pose_at(t)
    geom = VehicleGeometry(length=obs.length, width=obs.width,
                           wheelbase=min(obs.length, obs.width) / 2)
    corners = footprint_polygon(VehicleState(x, y, h, 0.0), geom)
    return _to_px(corners, ego, grid)


def _steps(window: float, dt: float, what: str) -> int:
    n = window / dt
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"{what} {window} is not a multiple of dt {dt}")
    return int(round(n))


def render_input(world: ScenarioWorld, now: float, ego: VehicleState, grid: GridSpec,
                 history_window: float = 2.0, horizon: float = 2.0, dt: float = 0.2,
                 ego_history: Optional[Sequence] = None,
                 ego_geometry: VehicleGeometry = DEFAULT_EGO_GEOMETRY,
                 max_speed_ref: float = DEFAULT_MAX_SPEED_REF) -> ChannelStack:
    """Render the multi-channel ego-centric BEV input for one frame."""
    n_hist = _steps(history_window, dt, "history_window")
    n_pred = _steps(horizon, dt, "horizon")
    shape = grid.shape
    ch = {name: np.zeros(shape, dtype=np.float32) for name in CHANNEL_NAMES}
    res = grid.resolution

    # ego box, full intensity
    rasterops.fill_polygon(ch["agent_box"],
                           _to_px(footprint_polygon(ego, ego_geometry), ego, grid), 1.0)

    # past ego poses as fading points, oldest darkest
    for k in range(1, n_hist + 1):
        pos = _ego_history_pose(ego_history, now - k * dt, ego)
        intensity = (n_hist + 1 - k) / n_hist
        rasterops.draw_point(ch["past_agent_poses"], _to_px(pos, ego, grid), intensity)

    # obstacles: predictions fade up with lead time, history fades down with age
    for obs in world.obstacles:
        if not _obstacle_near(world, obs, ego, grid, now - history_window,
                              now + horizon):
            continue
        for k in range(1, n_pred + 1):
            poly = _obstacle_box_px(obs, now + k * dt, ego, grid)
            rasterops.fill_polygon(ch["obstacle_prediction"], poly, k / n_pred)
        for k in range(0, n_hist + 1):
            poly = _obstacle_box_px(obs, now - k * dt, ego, grid)
            rasterops.fill_polygon(ch["obstacle_history"], poly,
                                   (n_hist + 1 - k) / (n_hist + 1))

    # road structure in three grey channels
    route_set = set(world.route)
    for ln in world.lanes:
        pl = _to_px(ln.centerline, ego, grid)
        hw_px = ln.width / 2.0 / res
        if not rasterops.polyline_bbox_hits_grid(pl, grid, hw_px + 2):
            continue
        rasterops.stroke_polyline(ch["road_surface"], pl, hw_px, 1.0)
        rasterops.stroke_polyline_band(ch["road_boundary"], pl, hw_px - 0.5,
                                       hw_px + 0.5, 1.0)
        rasterops.stroke_polyline(ch["speed_limit"], pl, hw_px,
                                  min(1.0, ln.speed_limit / max_speed_ref))
        if ln.id in route_set:
            rasterops.stroke_polyline(ch["routing"], pl, hw_px, 1.0)
    for poly in world.junctions + world.crosswalks:
        rasterops.fill_polygon(ch["road_junction"], _to_px(poly, ego, grid), 1.0)

    # traffic lights color their controlled lanes by phase
    for sig in world.signals:
        level = phase_level(sig.phase_at(now))
        if level <= 0.0:
            continue
        for lid in sig.controlled_lanes:
            ln = world.lane_by_id(lid)
            pl = _to_px(ln.centerline, ego, grid)
            hw_px = ln.width / 2.0 / res
            if rasterops.polyline_bbox_hits_grid(pl, grid, hw_px + 2):
                rasterops.stroke_polyline(ch["traffic_lights"], pl, hw_px, level)

    return ChannelStack(grid=grid, channels=ch)


def render_task_masks(world: ScenarioWorld, now: float, grid: GridSpec,
                      ego: VehicleState, horizon: float = 2.0, dt: float = 0.2,
                      signal_zone_depth: float = DEFAULT_SIGNAL_ZONE_DEPTH) -> TaskMasks:
    """Render the four binary forbidden masks for one frame."""
    n_pred = _steps(horizon, dt, "horizon")
    shape = grid.shape
    res = grid.resolution

    obstacle = np.zeros(shape, dtype=np.float32)
    for obs in world.obstacles:
        if not _obstacle_near(world, obs, ego, grid, now, now + horizon):
            continue
        for k in range(0, n_pred + 1):
            rasterops.fill_polygon(obstacle, _obstacle_box_px(obs, now + k * dt, ego, grid), 1.0)

    corridor = np.zeros(shape, dtype=np.float32)
    for ln in world.route_lanes():
        pl = _to_px(ln.centerline, ego, grid)
        hw_px = ln.width / 2.0 / res
        if rasterops.polyline_bbox_hits_grid(pl, grid, hw_px + 2):
            rasterops.stroke_polyline(corridor, pl, hw_px, 1.0)
    route = (1.0 - corridor).astype(np.float32)

    drivable = np.zeros(shape, dtype=np.float32)
    for poly in world.drivable_area:
        rasterops.fill_polygon(drivable, _to_px(poly, ego, grid), 1.0)
    road = (1.0 - drivable).astype(np.float32)

    signal = np.zeros(shape, dtype=np.float32)
    route_set = set(world.route)
    active = [sig for sig in world.signals
              if sig.phase_at(now) == "red" and route_set.intersection(sig.controlled_lanes)]
    if active:
        try:
            ref = world.route_reference()
        except Exception:
            ref = None
        if ref is not None:
            mesh_c, mesh_r = rasterops.pixel_mesh(grid)
            pts = np.stack([mesh_c.ravel(), mesh_r.ravel()], axis=-1)
            ref_px = _to_px(ref, ego, grid)
            dist_px, station_px = rasterops.polyline_distance_station(pts, ref_px)
            dist_m = dist_px * res
            station_m = station_px * res
            hw = max(ln.width for ln in world.route_lanes()) / 2.0
            for sig in active:
                mid = sig.stop_line.mean(axis=0)
                _, s_stop_arr = rasterops.polyline_distance_station(mid[None, :], ref)
                s_stop = float(s_stop_arr[0])
                zone = (dist_m <= hw) & (station_m >= s_stop) & \
                       (station_m <= s_stop + signal_zone_depth)
                signal = np.maximum(signal, zone.reshape(shape).astype(np.float32))

    return TaskMasks(obstacle=obstacle, route=route, road=road, signal=signal)
