"""Shipped closed-loop scenario suite: 20 scenarios, 5 per category.

Scenarios are generated from a few geometric primitives (straight and arc
lane chains, corridor polygons) and written as schema-versioned YAML files.
The scripted expert must pass every one of them; that contract is enforced
by the test suite.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .core import VehicleState
from .world import Lane, ObstacleTrack, ScenarioWorld, Signal, save_world

SPACING = 2.0


def straight_pts(start, heading, length, spacing=SPACING) -> np.ndarray:
    n = max(2, int(math.ceil(length / spacing)) + 1)
    ts = np.linspace(0.0, length, n)
    h = np.array([math.cos(heading), math.sin(heading)])
    return np.asarray(start, dtype=float)[None, :] + ts[:, None] * h[None, :]


def arc_pts(start, heading, radius, angle, spacing=SPACING) -> np.ndarray:
    """Arc from start with initial heading; angle > 0 turns left."""
    n = max(3, int(math.ceil(abs(angle) * radius / spacing)) + 1)
    sgn = 1.0 if angle > 0 else -1.0
    cx = start[0] - sgn * radius * math.sin(heading)
    cy = start[1] + sgn * radius * math.cos(heading)
    a0 = math.atan2(start[1] - cy, start[0] - cx)
    aa = a0 + sgn * np.linspace(0.0, abs(angle), n)
    return np.stack([cx + radius * np.cos(aa), cy + radius * np.sin(aa)], axis=1)


def chain_heading(pts) -> float:
    d = pts[-1] - pts[-2]
    return math.atan2(d[1], d[0])


def corridor_polygon(centerline: np.ndarray, halfwidth: float) -> np.ndarray:
    """Offset polygon around a polyline (left boundary + reversed right)."""
    pts = np.asarray(centerline, dtype=float)
    d = np.diff(pts, axis=0)
    seg_n = np.stack([-d[:, 1], d[:, 0]], axis=1)
    seg_n /= np.linalg.norm(seg_n, axis=1, keepdims=True)
    normals = np.empty_like(pts)
    normals[0] = seg_n[0]
    normals[-1] = seg_n[-1]
    if len(pts) > 2:
        mid = seg_n[:-1] + seg_n[1:]
        mid /= np.maximum(np.linalg.norm(mid, axis=1, keepdims=True), 1e-9)
        normals[1:-1] = mid
    left = pts + halfwidth * normals
    right = pts - halfwidth * normals
    return np.vstack([left, right[::-1]])


def lane_chain(prefix: str, pieces, width, limit) -> list[Lane]:
    lanes = []
    for i, pts in enumerate(pieces):
        lanes.append(Lane(id=f"{prefix}{i}", centerline=pts, width=width,
                          speed_limit=limit if np.isscalar(limit) else limit[i]))
    return lanes


def make_world(name, category, lanes, route, obstacles=(), signals=(),
               junctions=(), crosswalks=(), ego_speed=4.0, dest_back=8.0,
               budget=None, shoulder=0.6, extra_drivable=()):
    route_lanes = [l for l in lanes if l.id in route]
    drivable = [corridor_polygon(l.centerline, l.width / 2 + shoulder)
                for l in lanes]
    drivable += [np.asarray(p, dtype=float) for p in extra_drivable]
    drivable += [np.asarray(p, dtype=float) for p in junctions]
    ref = []
    for lid in route:
        pts = next(l for l in lanes if l.id == lid).centerline
        ref.extend(pts if not ref else pts[1:])
    ref = np.asarray(ref)
    seg = np.hypot(*np.diff(ref, axis=0).T)
    length = float(seg.sum())
    acc = np.concatenate([[0], np.cumsum(seg)])

    def point_at(s):
        k = max(0, min(int(np.searchsorted(acc, s)) - 1, len(seg) - 1))
        t = (s - acc[k]) / seg[k]
        return ref[k] + t * (ref[k + 1] - ref[k]), math.atan2(
            ref[k + 1][1] - ref[k][1], ref[k + 1][0] - ref[k][0])

    # start a car length inside the corridor, end a little short of it
    start_pt, ego_heading = point_at(6.0)
    dest, _ = point_at(length - dest_back)
    limit_min = min(l.speed_limit for l in route_lanes)
    if budget is None:
        budget = float(np.clip(round(1.8 * length / limit_min + 14), 30, 90))
    return ScenarioWorld(
        name=name, category=category, lanes=tuple(lanes), route=tuple(route),
        drivable_area=tuple(drivable), junctions=tuple(junctions),
        crosswalks=tuple(crosswalks), signals=tuple(signals),
        obstacles=tuple(obstacles),
        ego_start=VehicleState(float(start_pt[0]), float(start_pt[1]),
                               ego_heading, ego_speed),
        destination=(float(dest[0]), float(dest[1])), destination_radius=3.0,
        time_budget=float(budget))


def moving_track(oid, length, width, path_pts, speed, t0=0.0, hold=0.0):
    """Waypoints along a polyline at constant speed, optional initial hold."""
    pts = np.asarray(path_pts, dtype=float)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    acc = np.concatenate([[0], np.cumsum(seg)])
    headings = np.arctan2(np.diff(pts[:, 1]), np.diff(pts[:, 0]))
    rows = []
    if hold > 0:
        rows.append([t0, pts[0][0], pts[0][1], headings[0]])
        t0 = t0 + hold
    for k, p in enumerate(pts):
        h = headings[min(k, len(headings) - 1)]
        rows.append([t0 + acc[k] / speed, p[0], p[1], h])
    return ObstacleTrack(id=oid, length=length, width=width, waypoints=rows)


def parked(oid, x, y, heading=0.0, length=4.4, width=1.8):
    return ObstacleTrack(id=oid, length=length, width=width,
                         waypoints=[[0.0, x, y, heading]])


def _junction_box(x, half=8.0, width=22.0):
    return np.array([[x - half, -width / 2], [x + half, -width / 2],
                     [x + half, width / 2], [x - half, width / 2]])


def build_suite() -> list[ScenarioWorld]:
    worlds = []

    # ---- Cruising -------------------------------------------------------
    worlds.append(make_world(
        "cruise_straight", "Cruising",
        lane_chain("a", [straight_pts((0, 0), 0.0, 170)], 3.6, 9.0),
        ["a0"], ego_speed=5.0))

    p1 = straight_pts((0, 0), 0.0, 40)
    p2 = arc_pts(p1[-1], 0.0, 60.0, math.radians(28))
    p3 = arc_pts(p2[-1], chain_heading(p2), 60.0, -math.radians(28))
    p4 = straight_pts(p3[-1], chain_heading(p3), 40)
    worlds.append(make_world(
        "cruise_s_curve", "Cruising",
        lane_chain("s", [p1, p2, p3, p4], 3.6, 8.0),
        ["s0", "s1", "s2", "s3"], ego_speed=5.0))

    p1 = straight_pts((0, 0), 0.0, 50)
    p2 = arc_pts(p1[-1], 0.0, 35.0, math.pi / 2)
    p3 = straight_pts(p2[-1], chain_heading(p2), 40)
    worlds.append(make_world(
        "cruise_left_90", "Cruising",
        lane_chain("c", [p1, p2, p3], 3.6, 7.0), ["c0", "c1", "c2"],
        ego_speed=4.0))

    p1 = straight_pts((0, 0), 0.0, 45)
    p2 = arc_pts(p1[-1], 0.0, 45.0, -math.pi / 2)
    p3 = straight_pts(p2[-1], chain_heading(p2), 45)
    worlds.append(make_world(
        "cruise_right_90", "Cruising",
        lane_chain("r", [p1, p2, p3], 3.6, 8.0), ["r0", "r1", "r2"],
        ego_speed=4.0))

    pa = straight_pts((0, 0), 0.0, 90)
    pb = straight_pts(pa[-1], 0.0, 80)
    worlds.append(make_world(
        "cruise_limit_drop", "Cruising",
        lane_chain("d", [pa, pb], 3.6, [10.0, 5.0]), ["d0", "d1"],
        ego_speed=6.0))

    # ---- Junction -------------------------------------------------------
    cross = Lane(id="xcross", centerline=straight_pts((70, -20), math.pi / 2, 40),
                 width=3.6, speed_limit=8.0)
    main = lane_chain("j", [straight_pts((0, 0), 0.0, 150)], 3.6, 8.0)
    worlds.append(make_world(
        "junction_green_straight", "Junction", main + [cross], ["j0"],
        signals=[Signal(id="sigA", stop_line=[[62.0, -2.2], [62.0, 2.2]],
                        controlled_lanes=("j0",), schedule=((1e9, "green"),))],
        junctions=[_junction_box(70.0)],
        crosswalks=[np.array([[60.0, -6.0], [63.0, -6.0], [63.0, 6.0], [60.0, 6.0]])],
        ego_speed=5.0))

    worlds.append(make_world(
        "junction_red_wait", "Junction",
        lane_chain("w", [straight_pts((0, 0), 0.0, 150)], 3.6, 8.0) + [cross],
        ["w0"],
        signals=[Signal(id="sigB", stop_line=[[62.0, -2.2], [62.0, 2.2]],
                        controlled_lanes=("w0",),
                        schedule=((12.0, "red"), (1e9, "green")))],
        junctions=[_junction_box(70.0)], ego_speed=5.0, budget=55.0))

    p1 = straight_pts((0, 0), 0.0, 55)
    p2 = arc_pts(p1[-1], 0.0, 12.0, -math.pi / 2)
    p3 = straight_pts(p2[-1], chain_heading(p2), 45)
    worlds.append(make_world(
        "junction_right_turn", "Junction",
        lane_chain("t", [p1, p2, p3], 3.6, 7.0), ["t0", "t1", "t2"],
        signals=[Signal(id="sigC", stop_line=[[51.0, -2.2], [51.0, 2.2]],
                        controlled_lanes=("t0",), schedule=((1e9, "green"),))],
        junctions=[_junction_box(62.0, half=14.0, width=30.0)], ego_speed=4.0))

    p1 = straight_pts((0, 0), 0.0, 55)
    p2 = arc_pts(p1[-1], 0.0, 18.0, math.pi / 2)
    p3 = straight_pts(p2[-1], chain_heading(p2), 45)
    worlds.append(make_world(
        "junction_left_turn", "Junction",
        lane_chain("l", [p1, p2, p3], 3.6, 7.0), ["l0", "l1", "l2"],
        signals=[Signal(id="sigD", stop_line=[[51.0, -2.2], [51.0, 2.2]],
                        controlled_lanes=("l0",),
                        schedule=((8.0, "red"), (1e9, "green")))],
        junctions=[_junction_box(65.0, half=16.0, width=42.0)], ego_speed=4.0,
        budget=60.0))

    p1 = straight_pts((0, 0), 0.0, 60)
    p2 = arc_pts(p1[-1], 0.0, 8.0, math.pi)
    p3 = straight_pts(p2[-1], chain_heading(p2), 60)
    worlds.append(make_world(
        "junction_uturn", "Junction",
        lane_chain("u", [p1, p2, p3], 4.0, 6.0), ["u0", "u1", "u2"],
        junctions=[_junction_box(66.0, half=12.0, width=34.0)], ego_speed=4.0,
        budget=70.0))

    # ---- Static Interaction ---------------------------------------------
    worlds.append(make_world(
        "static_nudge", "Static Interaction",
        lane_chain("n", [straight_pts((0, 0), 0.0, 150)], 6.4, 7.0), ["n0"],
        obstacles=[parked("car1", 62.0, -1.1)], ego_speed=5.0))

    worlds.append(make_world(
        "static_double_nudge", "Static Interaction",
        lane_chain("m", [straight_pts((0, 0), 0.0, 170)], 7.0, 7.0), ["m0"],
        obstacles=[parked("car1", 52.0, -1.3), parked("car2", 98.0, 1.3)],
        ego_speed=5.0))

    worlds.append(make_world(
        "static_cone", "Static Interaction",
        lane_chain("k", [straight_pts((0, 0), 0.0, 140)], 5.6, 7.0), ["k0"],
        obstacles=[parked("cone", 58.0, -0.5, length=0.8, width=0.8)],
        ego_speed=5.0))

    p1 = straight_pts((0, 0), 0.0, 40)
    p2 = arc_pts(p1[-1], 0.0, 40.0, math.radians(65))
    p3 = straight_pts(p2[-1], chain_heading(p2), 40)
    curve_mid = p2[len(p2) // 2]
    h_mid = chain_heading(p2[:len(p2) // 2 + 1])
    off = np.array([-math.sin(h_mid), math.cos(h_mid)]) * -1.6
    worlds.append(make_world(
        "static_curve_nudge", "Static Interaction",
        lane_chain("v", [p1, p2, p3], 7.4, 6.0), ["v0", "v1", "v2"],
        obstacles=[parked("car1", curve_mid[0] + off[0], curve_mid[1] + off[1],
                          heading=h_mid)],
        ego_speed=4.0))

    worlds.append(make_world(
        "static_gate", "Static Interaction",
        lane_chain("g", [straight_pts((0, 0), 0.0, 160)], 8.6, 7.0), ["g0"],
        obstacles=[parked("left", 70.0, 2.7), parked("right", 70.0, -2.7)],
        ego_speed=5.0))

    # ---- Dynamic Interaction --------------------------------------------
    lead_path = straight_pts((25, 0), 0.0, 185)  # keeps going past the goal
    worlds.append(make_world(
        "dynamic_follow", "Dynamic Interaction",
        lane_chain("f", [straight_pts((0, 0), 0.0, 170)], 3.6, 8.0), ["f0"],
        obstacles=[moving_track("lead", 4.4, 1.8, lead_path, speed=5.0)],
        ego_speed=5.0, budget=60.0))

    crawl_path = straight_pts((40, -1.2), 0.0, 60)
    worlds.append(make_world(
        "dynamic_crawler_pass", "Dynamic Interaction",
        lane_chain("p", [straight_pts((0, 0), 0.0, 160)], 7.2, 7.0), ["p0"],
        obstacles=[moving_track("crawler", 4.4, 1.8, crawl_path, speed=0.8)],
        ego_speed=5.0, budget=60.0))

    stopgo = ObstacleTrack(
        id="stopgo", length=4.4, width=1.8,
        waypoints=[[0.0, 30.0, 0.0, 0.0], [10.0, 80.0, 0.0, 0.0],
                   [22.0, 80.0 + 0.01, 0.0, 0.0], [40.0, 170.0, 0.0, 0.0]])
    worlds.append(make_world(
        "dynamic_lead_stop_go", "Dynamic Interaction",
        lane_chain("q", [straight_pts((0, 0), 0.0, 170)], 3.6, 8.0), ["q0"],
        obstacles=[stopgo], ego_speed=5.0, budget=75.0))

    oncoming_lane = Lane(id="opp", centerline=straight_pts((170, 3.6), math.pi, 170),
                         width=3.6, speed_limit=8.0)
    worlds.append(make_world(
        "dynamic_oncoming", "Dynamic Interaction",
        lane_chain("o", [straight_pts((0, 0), 0.0, 170)], 3.6, 8.0)
        + [oncoming_lane],
        ["o0"],
        obstacles=[moving_track("oncomer", 4.4, 1.8,
                                straight_pts((170, 3.6), math.pi, 170), speed=7.0)],
        ego_speed=5.0))

    # the merger keeps driving past the destination so it never parks on it
    merge_path = np.array([[35.0, -3.0], [45.0, -2.4], [55.0, -0.6],
                           [62.0, 0.0], [210.0, 0.0]])
    worlds.append(make_world(
        "dynamic_merge_follow", "Dynamic Interaction",
        lane_chain("z", [straight_pts((0, 0), 0.0, 170)], 4.4, 8.0), ["z0"],
        obstacles=[moving_track("merger", 4.4, 1.8, merge_path, speed=5.5,
                                hold=2.0)],
        ego_speed=5.0, budget=60.0,
        extra_drivable=[np.array([[30.0, -4.4], [70.0, -4.4], [70.0, -1.0],
                                  [30.0, -1.0]])]))

    return worlds


def write_suite(out_dir) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for world in build_suite():
        save_world(world, out / f"{world.name}.yaml")
        names.append(world.name)
    return names


def load_suite(scenario_dir=None) -> list[ScenarioWorld]:
    from .world import load_world
    if scenario_dir:
        directory = Path(scenario_dir)
    else:
        directory = Path(__file__).parent / "scenarios"
    paths = sorted(directory.glob("*.yaml"))
    if not paths:
        raise FileNotFoundError(f"no scenario files in {directory}")
    return [load_world(p) for p in paths]
