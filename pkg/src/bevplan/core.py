"""Grid geometry and the vehicle/trajectory data model shared by all modules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Plausible passenger-vehicle actuation bounds; configurable wherever used.
DEFAULT_STEER_MAX = 0.52  # rad
DEFAULT_ACCEL_MAX = 4.0  # m/s^2


def wrap_angle(a):
    """Normalize an angle (or array of angles) to (-pi, pi]."""
    w = np.mod(-np.asarray(a) + np.pi, 2.0 * np.pi)
    out = -(w - np.pi)
    return float(out) if np.isscalar(a) or np.ndim(a) == 0 else out


@dataclass(frozen=True)
class GridSpec:
    """Ego-centric BEV raster geometry.

    anchor_px is the (column, row) pixel the ego is pinned to; heading renders
    upward (toward row 0).
    """

    width_px: int = 200
    height_px: int = 200
    resolution: float = 0.2  # meters per pixel
    anchor_px: tuple[float, float] = (100.0, 160.0)  # (i0, j0) = (col, row)

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        i0, j0 = self.anchor_px
        if not (0 <= i0 < self.width_px and 0 <= j0 < self.height_px):
            raise ValueError("anchor must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols) array shape."""
        return (self.height_px, self.width_px)


@dataclass(frozen=True)
class VehicleGeometry:
    """Rigid-body box dimensions of a vehicle."""

    length: float = 4.8
    width: float = 2.1
    wheelbase: float = 2.8

    def __post_init__(self):
        if not (0 < self.wheelbase <= self.length):
            raise ValueError("need 0 < wheelbase <= length")
        if self.width <= 0:
            raise ValueError("width must be positive")


@dataclass(frozen=True)
class VehicleState:
    """Planar vehicle state (x, y, heading, speed). Heading stored wrapped."""

    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))
        if self.speed < 0:
            raise ValueError(f"negative speed {self.speed!r} (reverse driving unsupported)")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed], dtype=float)

    @staticmethod
    def from_array(arr) -> "VehicleState":
        x, y, h, v = (float(c) for c in arr)
        return VehicleState(x, y, h, v)


@dataclass(frozen=True)
class Control:
    """One planning-interval control: front-wheel steer angle and acceleration."""

    steer: float
    accel: float

    def validate(self, steer_max: float = DEFAULT_STEER_MAX,
                 accel_max: float = DEFAULT_ACCEL_MAX) -> None:
        if abs(self.steer) > steer_max + 1e-12:
            raise ValueError(f"steer {self.steer} exceeds limit {steer_max}")
        if abs(self.accel) > accel_max + 1e-12:
            raise ValueError(f"accel {self.accel} exceeds limit {accel_max}")

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.accel], dtype=float)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly timed state sequence with optional aligned controls.

    controls[t] takes states[t] to states[t+1]; length is len(states) - 1.
    """

    dt: float
    states: tuple[VehicleState, ...]
    controls: Optional[tuple[Control, ...]] = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        states = tuple(self.states)
        object.__setattr__(self, "states", states)
        if len(states) < 1:
            raise ValueError("trajectory needs at least one state")
        if self.controls is not None:
            controls = tuple(self.controls)
            object.__setattr__(self, "controls", controls)
            if len(controls) != len(states) - 1:
                raise ValueError(
                    f"controls length {len(controls)} != states length {len(states)} - 1")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def duration(self) -> float:
        return self.dt * (len(self.states) - 1)

    def states_array(self) -> np.ndarray:
        """(T, 4) array of [x, y, heading, speed]."""
        return np.array([s.as_array() for s in self.states])

    def controls_array(self) -> np.ndarray:
        if self.controls is None:
            raise ValueError("trajectory carries no controls")
        return np.array([c.as_array() for c in self.controls])

    def positions(self) -> np.ndarray:
        return self.states_array()[:, :2]


def _ego_basis(ego: VehicleState) -> tuple[np.ndarray, np.ndarray]:
    h = np.array([math.cos(ego.heading), math.sin(ego.heading)])
    left = np.array([-h[1], h[0]])
    return h, left


def world_to_image(point, ego: VehicleState, grid: GridSpec) -> np.ndarray:
    """Map world point(s) to continuous (col, row) pixel coordinates.

    Ego maps to the anchor pixel; points ahead of the ego get smaller row
    indices (heading renders up). Accepts a single (2,) point or an (N, 2)
    array; no clipping is performed.
    """
    p = np.asarray(point, dtype=float)
    h, left = _ego_basis(ego)
    d = p - np.array([ego.x, ego.y])
    fwd = d @ h
    lat = d @ left
    i0, j0 = grid.anchor_px
    col = i0 - lat / grid.resolution
    row = j0 - fwd / grid.resolution
    return np.stack([col, row], axis=-1)


def image_to_world(pixel, ego: VehicleState, grid: GridSpec) -> np.ndarray:
    """Inverse of :func:`world_to_image` (exact affine inverse)."""
    px = np.asarray(pixel, dtype=float)
    i0, j0 = grid.anchor_px
    lat = -(px[..., 0] - i0) * grid.resolution
    fwd = -(px[..., 1] - j0) * grid.resolution
    h, left = _ego_basis(ego)
    d = fwd[..., None] * h + lat[..., None] * left
    return d + np.array([ego.x, ego.y])


def to_ego_frame(state: VehicleState, ego: VehicleState) -> VehicleState:
    """Express a world state in the ego frame (origin at ego, x along heading)."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    dx, dy = state.x - ego.x, state.y - ego.y
    return VehicleState(c * dx + s * dy, -s * dx + c * dy,
                        wrap_angle(state.heading - ego.heading), state.speed)


def from_ego_frame(state: VehicleState, ego: VehicleState) -> VehicleState:
    """Inverse of :func:`to_ego_frame`."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return VehicleState(ego.x + c * state.x - s * state.y,
                        ego.y + s * state.x + c * state.y,
                        wrap_angle(state.heading + ego.heading), state.speed)


def trajectory_to_ego_frame(traj: Trajectory, ego: VehicleState) -> Trajectory:
    return Trajectory(dt=traj.dt,
                      states=tuple(to_ego_frame(s, ego) for s in traj.states),
                      controls=traj.controls)


def trajectory_from_ego_frame(traj: Trajectory, ego: VehicleState) -> Trajectory:
    return Trajectory(dt=traj.dt,
                      states=tuple(from_ego_frame(s, ego) for s in traj.states),
                      controls=traj.controls)


def footprint_polygon(state: VehicleState, geom: VehicleGeometry) -> np.ndarray:
    """Oriented vehicle box as a (4, 2) corner array (CCW, front-left first).

    The box is centered on (x, y); the wheelbase origin convention is left to
    callers (states here are box centers).
    """
    c, s = math.cos(state.heading), math.sin(state.heading)
    hl, hw = geom.length / 2.0, geom.width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([state.x, state.y])
