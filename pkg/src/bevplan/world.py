"""Scenario world model: lanes, obstacles, signals, route, and the YAML
scenario file format (schema_version 1).

Worlds are immutable after construction and validated eagerly: dangling
route/signal lane references, non-increasing obstacle timestamps and a
nonpositive time budget are rejected here, not at render time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .core import VehicleState, wrap_angle

SCHEMA_VERSION = 1
PHASES = ("red", "yellow", "green", "unknown")
CATEGORIES = ("Cruising", "Junction", "Static Interaction", "Dynamic Interaction")


class WorldError(ValueError):
    """Malformed scenario content."""


@dataclass(frozen=True)
class Lane:
    id: str
    centerline: np.ndarray  # (K, 2) world meters
    width: float
    speed_limit: float

    def __post_init__(self):
        cl = np.asarray(self.centerline, dtype=float)
        object.__setattr__(self, "centerline", cl)
        if cl.ndim != 2 or cl.shape[0] < 2 or cl.shape[1] != 2:
            raise WorldError(f"lane {self.id}: centerline must be (K>=2, 2)")
        if self.width <= 0 or self.speed_limit <= 0:
            raise WorldError(f"lane {self.id}: width and speed_limit must be positive")


@dataclass(frozen=True)
class Signal:
    id: str
    stop_line: np.ndarray  # (2, 2) segment
    controlled_lanes: tuple[str, ...]
    schedule: tuple[tuple[float, str], ...]  # (until_time, phase), increasing

    def __post_init__(self):
        sl = np.asarray(self.stop_line, dtype=float)
        object.__setattr__(self, "stop_line", sl)
        object.__setattr__(self, "controlled_lanes", tuple(self.controlled_lanes))
        object.__setattr__(self, "schedule", tuple((float(t), str(p)) for t, p in self.schedule))
        if sl.shape != (2, 2):
            raise WorldError(f"signal {self.id}: stop_line must be a 2-point segment")
        if not self.schedule:
            raise WorldError(f"signal {self.id}: empty phase schedule")
        times = [t for t, _ in self.schedule]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise WorldError(f"signal {self.id}: schedule times must increase")
        for _, p in self.schedule:
            if p not in PHASES:
                raise WorldError(f"signal {self.id}: unknown phase {p!r}")

    def phase_at(self, t: float) -> str:
        for until, phase in self.schedule:
            if t < until:
                return phase
        return self.schedule[-1][1]


@dataclass(frozen=True)
class ObstacleTrack:
    id: str
    length: float
    width: float
    waypoints: np.ndarray  # (K, 4): t, x, y, heading

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        object.__setattr__(self, "waypoints", wp)
        if wp.ndim != 2 or wp.shape[1] != 4 or wp.shape[0] < 1:
            raise WorldError(f"obstacle {self.id}: waypoints must be (K>=1, 4)")
        if np.any(np.diff(wp[:, 0]) <= 0):
            raise WorldError(f"obstacle {self.id}: timestamps must strictly increase")
        if self.length <= 0 or self.width <= 0:
            raise WorldError(f"obstacle {self.id}: box dims must be positive")

    def pose_at(self, t: float) -> tuple[float, float, float]:
        """(x, y, heading) linearly interpolated, clamped at the ends."""
        wp = self.waypoints
        if t <= wp[0, 0]:
            return tuple(wp[0, 1:4])
        if t >= wp[-1, 0]:
            return tuple(wp[-1, 1:4])
        k = int(np.searchsorted(wp[:, 0], t, side="right")) - 1
        t0, t1 = wp[k, 0], wp[k + 1, 0]
        u = (t - t0) / (t1 - t0)
        x = wp[k, 1] + u * (wp[k + 1, 1] - wp[k, 1])
        y = wp[k, 2] + u * (wp[k + 1, 2] - wp[k, 2])
        dh = wrap_angle(wp[k + 1, 3] - wp[k, 3])
        h = wrap_angle(wp[k, 3] + u * dh)
        return (float(x), float(y), float(h))

    def speed_at(self, t: float) -> float:
        """Finite-difference speed of the scripted motion at time t.

        Zero outside the waypoint time span (the track is clamped there).
        """
        wp = self.waypoints
        if len(wp) < 2 or t < wp[0, 0] or t > wp[-1, 0]:
            return 0.0
        k = int(np.clip(np.searchsorted(wp[:, 0], t, side="right") - 1, 0, len(wp) - 2))
        dt = wp[k + 1, 0] - wp[k, 0]
        d = math.hypot(wp[k + 1, 1] - wp[k, 1], wp[k + 1, 2] - wp[k, 2])
        return d / dt


@dataclass(frozen=True)
class ScenarioWorld:
    name: str
    category: str
    lanes: tuple[Lane, ...]
    route: tuple[str, ...]
    drivable_area: tuple[np.ndarray, ...]  # polygons, each (K, 2)
    junctions: tuple[np.ndarray, ...]
    crosswalks: tuple[np.ndarray, ...]
    signals: tuple[Signal, ...]
    obstacles: tuple[ObstacleTrack, ...]
    ego_start: VehicleState
    destination: tuple[float, float]
    destination_radius: float
    time_budget: float

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "route", tuple(self.route))
        object.__setattr__(self, "drivable_area",
                           tuple(np.asarray(p, dtype=float) for p in self.drivable_area))
        object.__setattr__(self, "junctions",
                           tuple(np.asarray(p, dtype=float) for p in self.junctions))
        object.__setattr__(self, "crosswalks",
                           tuple(np.asarray(p, dtype=float) for p in self.crosswalks))
        object.__setattr__(self, "signals", tuple(self.signals))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.category not in CATEGORIES:
            raise WorldError(f"unknown category {self.category!r}")
        if self.time_budget <= 0:
            raise WorldError("time_budget must be positive")
        if self.destination_radius <= 0:
            raise WorldError("destination radius must be positive")
        ids = {ln.id for ln in self.lanes}
        if len(ids) != len(self.lanes):
            raise WorldError("duplicate lane ids")
        for lid in self.route:
            if lid not in ids:
                raise WorldError(f"route references unknown lane {lid!r}")
        for sig in self.signals:
            for lid in sig.controlled_lanes:
                if lid not in ids:
                    raise WorldError(f"signal {sig.id} references unknown lane {lid!r}")

    def lane_by_id(self, lid: str) -> Lane:
        for ln in self.lanes:
            if ln.id == lid:
                return ln
        raise KeyError(lid)

    def route_lanes(self) -> tuple[Lane, ...]:
        return tuple(self.lane_by_id(lid) for lid in self.route)

    def route_reference(self) -> np.ndarray:
        """Concatenated route centerline polyline, duplicate joints removed."""
        pts: list[np.ndarray] = []
        for ln in self.route_lanes():
            cl = ln.centerline
            if pts and np.allclose(pts[-1], cl[0], atol=1e-9):
                cl = cl[1:]
            pts.extend(cl)
        if len(pts) < 2:
            raise WorldError("route reference needs at least two points")
        return np.asarray(pts)


def _poly_list(raw) -> list[list[list[float]]]:
    return [np.asarray(p, dtype=float).tolist() for p in raw]


def world_to_dict(w: ScenarioWorld) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": w.name,
        "category": w.category,
        "time_budget": w.time_budget,
        "ego_start": {"x": w.ego_start.x, "y": w.ego_start.y,
                      "heading": w.ego_start.heading, "speed": w.ego_start.speed},
        "destination": {"x": w.destination[0], "y": w.destination[1],
                        "radius": w.destination_radius},
        "route": list(w.route),
        "lanes": [{"id": ln.id, "width": ln.width, "speed_limit": ln.speed_limit,
                   "centerline": ln.centerline.tolist()} for ln in w.lanes],
        "drivable_area": _poly_list(w.drivable_area),
        "junctions": _poly_list(w.junctions),
        "crosswalks": _poly_list(w.crosswalks),
        "signals": [{"id": s.id, "stop_line": s.stop_line.tolist(),
                     "controlled_lanes": list(s.controlled_lanes),
                     "schedule": [{"until": t, "phase": p} for t, p in s.schedule]}
                    for s in w.signals],
        "obstacles": [{"id": o.id, "length": o.length, "width": o.width,
                       "waypoints": [{"t": r[0], "x": r[1], "y": r[2], "heading": r[3]}
                                     for r in o.waypoints.tolist()]}
                      for o in w.obstacles],
    }


def world_from_dict(d: dict) -> ScenarioWorld:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise WorldError(f"unsupported scenario schema_version {version!r}")
    eg = d["ego_start"]
    dest = d["destination"]
    return ScenarioWorld(
        name=d["name"],
        category=d["category"],
        lanes=tuple(Lane(id=ln["id"], centerline=ln["centerline"], width=ln["width"],
                         speed_limit=ln["speed_limit"]) for ln in d.get("lanes", [])),
        route=tuple(d.get("route", [])),
        drivable_area=tuple(np.asarray(p) for p in d.get("drivable_area", [])),
        junctions=tuple(np.asarray(p) for p in d.get("junctions", [])),
        crosswalks=tuple(np.asarray(p) for p in d.get("crosswalks", [])),
        signals=tuple(Signal(id=s["id"], stop_line=s["stop_line"],
                             controlled_lanes=tuple(s.get("controlled_lanes", [])),
                             schedule=tuple((sc["until"], sc["phase"])
                                            for sc in s["schedule"]))
                      for s in d.get("signals", [])),
        obstacles=tuple(ObstacleTrack(id=o["id"], length=o["length"], width=o["width"],
                                      waypoints=[[wp["t"], wp["x"], wp["y"], wp["heading"]]
                                                 for wp in o["waypoints"]])
                        for o in d.get("obstacles", [])),
        ego_start=VehicleState(eg["x"], eg["y"], eg["heading"], eg["speed"]),
        destination=(dest["x"], dest["y"]),
        destination_radius=dest["radius"],
        time_budget=d["time_budget"],
    )


def load_world(path) -> ScenarioWorld:
    with open(path, "r", encoding="utf-8") as f:
        return world_from_dict(yaml.safe_load(f))


def save_world(w: ScenarioWorld, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(world_to_dict(w), f, sort_keys=False)
