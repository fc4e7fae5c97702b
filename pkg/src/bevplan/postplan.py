"""Post-processing gatekeeper: corridor bounds + piecewise-jerk path QP.

The learned planner's waypoints become the tracking objective of a convex
path problem in Frenet coordinates (station s along the route reference,
lateral offset l). Lane edges, obstacles and red lights enter as box bounds
and a blocking station for the speed stage. Any failure collapses to a
safe-stop trajectory with a diagnostic flag; nothing escapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from cvxopt import matrix, solvers

from .core import (Control, Trajectory, VehicleGeometry, VehicleState, wrap_angle)
from .kinematics import KinematicsError, rollout, track_positions
from .world import ScenarioWorld

solvers.options["show_progress"] = False


class CorridorError(RuntimeError):
    """Raised when no drivable corridor exists (lower >= upper somewhere)."""


class QPError(RuntimeError):
    """Solver failure or iteration cap; never silently absorbed here."""


@dataclass(frozen=True)
class PostplanConfig:
    ds: float = 1.0  # station spacing, m
    horizon_m: float = 50.0
    margin: float = 0.2  # shrink from lane edges
    obstacle_clearance: float = 0.45  # lateral body clearance when passing
    w_ref: float = 1.0
    w_slope: float = 10.0
    w_curve: float = 100.0
    w_jerk: float = 1000.0
    slope_max: float = 1.5
    l2_max: float = 1.0
    accel: float = 1.5  # comfortable accel, m/s^2
    decel: float = 2.5  # comfortable decel (positive), m/s^2
    lat_accel_max: float = 2.0
    stop_buffer: float = 0.5  # front bumper to stop line / obstacle
    headway: float = 1.5  # s, moving-leader time gap
    min_gap: float = 4.0  # m, standstill gap to a leader
    slow_leader_speed: float = 1.0  # m/s; at or below, treat as passable


class ReferenceLine:
    """Arc-length parameterized route polyline with Frenet projections."""

    def __init__(self, polyline: np.ndarray):
        pts = np.asarray(polyline, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("reference polyline needs >= 2 points")
        self.pts = pts
        d = np.diff(pts, axis=0)
        self.seg_len = np.hypot(d[:, 0], d[:, 1])
        keep = self.seg_len > 1e-9
        if not keep.all():
            # collapse duplicate vertices
            self.pts = pts = np.concatenate([pts[:1], pts[1:][keep]])
            d = np.diff(pts, axis=0)
            self.seg_len = np.hypot(d[:, 0], d[:, 1])
        self.dirs = d / self.seg_len[:, None]
        self.stations = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.stations[-1])

    def project(self, point) -> tuple[float, float]:
        """(station, signed lateral offset), left of travel positive."""
        p = np.asarray(point, dtype=float)
        a = self.pts[:-1]
        t = np.einsum("ij,ij->i", p[None, :] - a, self.dirs) / self.seg_len
        t = np.clip(t, 0.0, 1.0)
        proj = a + t[:, None] * (self.dirs * self.seg_len[:, None])
        d2 = ((p - proj) ** 2).sum(axis=1)
        k = int(np.argmin(d2))
        s = self.stations[k] + t[k] * self.seg_len[k]
        rel = p - proj[k]
        normal = np.array([-self.dirs[k, 1], self.dirs[k, 0]])
        return float(s), float(rel @ normal)

    def _locate(self, s: float) -> tuple[int, float]:
        s = float(np.clip(s, 0.0, self.length))
        k = int(np.clip(np.searchsorted(self.stations, s, side="right") - 1,
                        0, len(self.seg_len) - 1))
        return k, s - self.stations[k]

    def point_at(self, s: float) -> np.ndarray:
        k, r = self._locate(s)
        return self.pts[k] + r * self.dirs[k]

    def heading_at(self, s: float) -> float:
        k, _ = self._locate(s)
        return math.atan2(self.dirs[k, 1], self.dirs[k, 0])

    def offset_point(self, s: float, l: float) -> np.ndarray:
        k, r = self._locate(s)
        base = self.pts[k] + r * self.dirs[k]
        normal = np.array([-self.dirs[k, 1], self.dirs[k, 0]])
        return base + l * normal

    def curvature_samples(self) -> tuple[np.ndarray, np.ndarray]:
        """(station, |curvature|) at interior vertices (turn angle / length)."""
        if len(self.pts) < 3:
            return np.array([0.0]), np.array([0.0])
        h = np.arctan2(self.dirs[:, 1], self.dirs[:, 0])
        turn = np.abs(np.array([wrap_angle(b - a) for a, b in zip(h, h[1:])]))
        avg_len = 0.5 * (self.seg_len[:-1] + self.seg_len[1:])
        return self.stations[1:-1], turn / np.maximum(avg_len, 1e-6)


@dataclass
class Corridor:
    stations: np.ndarray  # (S,) absolute stations along the reference
    lower: np.ndarray  # (S,) center-point lateral bounds
    upper: np.ndarray
    blocking_station: Optional[float]  # absolute station; speed stage stops before
    ref: ReferenceLine

    def __post_init__(self):
        if np.any(np.diff(self.stations) <= 0):
            raise CorridorError("stations must strictly increase")
        if np.any(self.lower >= self.upper):
            raise CorridorError("empty corridor (lower >= upper)")


@dataclass(frozen=True)
class QPProblem:
    ds: object  # scalar or (S-1,) per-interval station spacing
    l_ref: np.ndarray  # (S,)
    lower: np.ndarray
    upper: np.ndarray
    init_l: float
    init_slope: float
    w_ref: float = 1.0
    w_slope: float = 10.0
    w_curve: float = 100.0
    w_jerk: float = 1000.0
    slope_max: float = 1.5
    l2_max: float = 1.0

    def ds_array(self) -> np.ndarray:
        n = len(self.l_ref) - 1
        ds = np.asarray(self.ds, dtype=float)
        out = np.full(n, float(ds)) if ds.ndim == 0 else ds
        if out.shape != (n,) or np.any(out <= 0):
            raise QPError("ds must be positive, one entry per interval")
        return out


@dataclass
class QPSolution:
    offsets: np.ndarray  # (S,)
    slopes: np.ndarray
    curvatures: np.ndarray
    objective: float
    kkt_residual: float
    eq_residual: float
    ineq_violation: float
    iterations: int


def _route_half_width(world: ScenarioWorld, ref: ReferenceLine, s: float) -> float:
    # width of the route lane whose centerline is nearest the ref point
    p = ref.point_at(s)
    best, bw = None, None
    for ln in world.route_lanes():
        d = np.min(np.hypot(*(ln.centerline - p).T))
        if best is None or d < best:
            best, bw = d, ln.width
    return (bw if bw is not None else 3.6) / 2.0


def _obstacle_span(obs, t0: float, t1: float, dt: float, ref: ReferenceLine,
                   geom_pad: float) -> Optional[tuple[float, float, float, float]]:
    """(s_min, s_max, l_min, l_max) swept Frenet box of an obstacle."""
    from .core import footprint_polygon, VehicleGeometry as VG
    smin = lmin = math.inf
    smax = lmax = -math.inf
    t = t0
    geom = VG(length=obs.length, width=obs.width,
              wheelbase=min(obs.length, obs.width) / 2)
    while t <= t1 + 1e-9:
        x, y, h = obs.pose_at(t)
        for corner in footprint_polygon(VehicleState(x, y, h, 0.0), geom):
            s, l = ref.project(corner)
            smin, smax = min(smin, s), max(smax, s)
            lmin, lmax = min(lmin, l), max(lmax, l)
        t += dt
    if not math.isfinite(smin):
        return None
    return smin - geom_pad, smax + geom_pad, lmin, lmax


def build_corridor(world: ScenarioWorld, ego: VehicleState, route: ReferenceLine,
                   learned: Optional[Trajectory], now: float = 0.0,
                   cfg: PostplanConfig = PostplanConfig(),
                   ego_geometry: VehicleGeometry = VehicleGeometry()) -> Corridor:
    """Corridor bounds around the route, carved by obstacles and signals."""
    s0, _ = route.project((ego.x, ego.y))
    horizon = min(cfg.horizon_m, max(route.length - s0, 2 * cfg.ds))
    # stations snap to the absolute ds grid (plus the exact ego station) so
    # consecutive replans see identical constraint windows
    first_snap = math.floor(s0 / cfg.ds + 1.0) * cfg.ds
    grid_pts = first_snap + np.arange(max(2, int(round(horizon / cfg.ds)) + 1)) * cfg.ds
    if grid_pts[0] - s0 < 0.05 * cfg.ds:
        grid_pts = grid_pts[1:] if len(grid_pts) > 2 else grid_pts + cfg.ds
    stations = np.concatenate([[s0], grid_pts])
    stations = stations[stations <= max(route.length, s0) + cfg.ds]
    if len(stations) < 3:
        stations = np.array([s0, s0 + cfg.ds, s0 + 2 * cfg.ds])
    half_w = ego_geometry.width / 2.0
    lower = np.empty(len(stations))
    upper = np.empty(len(stations))
    for i, s in enumerate(stations):
        hw = _route_half_width(world, route, s)
        bound = max(hw - half_w - cfg.margin, 0.05)
        lower[i], upper[i] = -bound, bound

    blocking: Optional[float] = None

    # red signals on the route block at the stop line
    route_set = set(world.route)
    for sig in world.signals:
        if not route_set.intersection(sig.controlled_lanes):
            continue
        if sig.phase_at(now) != "red":
            continue
        s_stop, _ = route.project(sig.stop_line.mean(axis=0))
        if s_stop >= s0 - 1.0:
            s_blk = s_stop - cfg.stop_buffer - ego_geometry.length / 2.0
            blocking = s_blk if blocking is None else min(blocking, s_blk)

    # obstacles carve laterally on the side they occupy, or block if impassable
    plan_window = 3.0
    l_ref_hint = None
    if learned is not None and len(learned.states) > 1:
        hint_pts = [route.project((st.x, st.y))[1] for st in learned.states]
        l_ref_hint = float(np.mean(hint_pts))
    for obs in world.obstacles:
        speed = obs.speed_at(now)
        if speed > cfg.slow_leader_speed:
            continue  # moving leaders are handled by the speed stage
        # the carve constrains the ego CENTER, so it must extend half a body
        # length beyond the obstacle span to keep the bumpers clear too
        pad = ego_geometry.length / 2.0 + 0.3
        span = _obstacle_span(obs, now, now + plan_window, 0.5, route, pad)
        if span is None:
            continue
        s_lo, s_hi, l_lo, l_hi = span
        if s_hi < stations[0] - 2.0 or s_lo > stations[-1] + 2.0:
            continue
        sel = (stations >= s_lo) & (stations <= s_hi)
        if not sel.any():
            continue
        need = half_w + cfg.obstacle_clearance
        pass_right_upper = l_lo - need
        pass_left_lower = l_hi + need
        right_gap = pass_right_upper - lower[sel].max()
        left_gap = upper[sel].min() - pass_left_lower
        side = None
        if right_gap > 0 or left_gap > 0:
            if l_ref_hint is not None:
                prefer = "left" if l_ref_hint > (l_lo + l_hi) / 2 else "right"
                if prefer == "left" and left_gap > 0:
                    side = "left"
                elif prefer == "right" and right_gap > 0:
                    side = "right"
            if side is None:
                side = "right" if right_gap >= left_gap else "left"
            if side == "right" and right_gap <= 0:
                side = "left" if left_gap > 0 else None
            elif side == "left" and left_gap <= 0:
                side = "right" if right_gap > 0 else None
        if side == "right":
            upper[sel] = np.minimum(upper[sel], pass_right_upper)
        elif side == "left":
            lower[sel] = np.maximum(lower[sel], pass_left_lower)
        else:
            s_blk = s_lo - cfg.stop_buffer - ego_geometry.length / 2.0
            blocking = s_blk if blocking is None else min(blocking, s_blk)
            # keep lateral bounds unchanged; speed stage stops before the span

    return Corridor(stations=stations, lower=lower, upper=upper,
                    blocking_station=blocking, ref=route)


def assemble_qp(problem: QPProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray,
                                             np.ndarray, np.ndarray, np.ndarray]:
    """Dense (P, q, G, h, A, b) of the piecewise-jerk path program."""
    S = len(problem.l_ref)
    ds = problem.ds_array()
    n = 3 * S

    def iL(i):
        return i

    def iD(i):
        return S + i

    def iK(i):
        return 2 * S + i

    P = np.zeros((n, n))
    q = np.zeros(n)
    for i in range(S):
        P[iL(i), iL(i)] += 2 * problem.w_ref
        q[iL(i)] += -2 * problem.w_ref * problem.l_ref[i]
        P[iD(i), iD(i)] += 2 * problem.w_slope
        P[iK(i), iK(i)] += 2 * problem.w_curve
    for i in range(S - 1):
        # jerk_i = (k_{i+1} - k_i) / ds_i
        w = 2 * problem.w_jerk / (ds[i] * ds[i])
        P[iK(i), iK(i)] += w
        P[iK(i + 1), iK(i + 1)] += w
        P[iK(i), iK(i + 1)] -= w
        P[iK(i + 1), iK(i)] -= w

    rows = []
    rhs = []
    for i in range(S - 1):
        r = np.zeros(n)
        r[iL(i + 1)] = 1.0
        r[iL(i)] = -1.0
        r[iD(i)] = -ds[i]
        r[iK(i)] = -ds[i] * ds[i] / 3.0
        r[iK(i + 1)] = -ds[i] * ds[i] / 6.0
        rows.append(r)
        rhs.append(0.0)
        r = np.zeros(n)
        r[iD(i + 1)] = 1.0
        r[iD(i)] = -1.0
        r[iK(i)] = -ds[i] / 2.0
        r[iK(i + 1)] = -ds[i] / 2.0
        rows.append(r)
        rhs.append(0.0)
    r = np.zeros(n)
    r[iL(0)] = 1.0
    rows.append(r)
    rhs.append(problem.init_l)
    r = np.zeros(n)
    r[iD(0)] = 1.0
    rows.append(r)
    rhs.append(problem.init_slope)
    A = np.array(rows)
    b = np.array(rhs)

    G_rows = []
    h_vals = []
    for i in range(S):
        r = np.zeros(n)
        r[iL(i)] = 1.0
        G_rows.append(r)
        h_vals.append(problem.upper[i])
        r = np.zeros(n)
        r[iL(i)] = -1.0
        G_rows.append(r)
        h_vals.append(-problem.lower[i])
        r = np.zeros(n)
        r[iD(i)] = 1.0
        G_rows.append(r)
        h_vals.append(problem.slope_max)
        r = np.zeros(n)
        r[iD(i)] = -1.0
        G_rows.append(r)
        h_vals.append(problem.slope_max)
        r = np.zeros(n)
        r[iK(i)] = 1.0
        G_rows.append(r)
        h_vals.append(problem.l2_max)
        r = np.zeros(n)
        r[iK(i)] = -1.0
        G_rows.append(r)
        h_vals.append(problem.l2_max)
    G = np.array(G_rows)
    h = np.array(h_vals)
    return P, q, G, h, A, b


def qp_objective(problem: QPProblem, l, slopes, curvs) -> float:
    jerk = np.diff(curvs) / problem.ds_array()
    return float(problem.w_ref * np.sum((l - problem.l_ref) ** 2)
                 + problem.w_slope * np.sum(slopes ** 2)
                 + problem.w_curve * np.sum(curvs ** 2)
                 + problem.w_jerk * np.sum(jerk ** 2))


def solve_path_qp(problem: QPProblem) -> QPSolution:
    """Solve the path program and verify first-order optimality ourselves."""
    if np.any(problem.lower > problem.upper):
        raise QPError("inconsistent box bounds")
    if not (problem.lower[0] - 1e-9 <= problem.init_l <= problem.upper[0] + 1e-9):
        raise QPError("initial offset outside corridor")
    P, q, G, h, A, b = assemble_qp(problem)
    try:
        sol = solvers.qp(matrix(P), matrix(q), matrix(G), matrix(h),
                         matrix(A), matrix(b))
    except ValueError as e:
        raise QPError(f"solver rejected problem: {e}") from e
    if sol["status"] != "optimal":
        raise QPError(f"solver status {sol['status']}")
    z = np.asarray(sol["x"]).ravel()
    lam = np.asarray(sol["z"]).ravel()
    nu = np.asarray(sol["y"]).ravel()
    stationarity = P @ z + q + G.T @ lam + A.T @ nu
    kkt = float(np.max(np.abs(stationarity)))
    eq_res = float(np.max(np.abs(A @ z - b)))
    ineq_vio = float(np.max(np.maximum(G @ z - h, 0.0)))
    S = len(problem.l_ref)
    return QPSolution(offsets=z[:S], slopes=z[S:2 * S], curvatures=z[2 * S:],
                      objective=float(qp_objective(problem, z[:S], z[S:2 * S], z[2 * S:])),
                      kkt_residual=kkt, eq_residual=eq_res, ineq_violation=ineq_vio,
                      iterations=int(sol["iterations"]))


@dataclass
class GatekeepDiagnostics:
    fallback: bool
    reason: str = ""
    qp_iterations: int = 0
    kkt_residual: float = float("nan")
    blocking_station: Optional[float] = None


def speed_profile(v0: float, n_steps: int, dt: float, s0: float,
                  v_limit_at, blocking: Optional[float],
                  cfg: PostplanConfig) -> np.ndarray:
    """Station schedule s(t) honoring limits, comfort accel and blocking.

    v_limit_at(s) -> speed cap at station s. Returns (n_steps + 1,) stations
    starting at s0.
    """
    s = s0
    v = max(0.0, v0)
    out = [s]
    # schedule never moves backward: a blocking station already behind the
    # ego degrades to hold-position; the envelope aims a pad short of the
    # block so one-tick execution overshoot still stops before it
    pad = 0.3
    blocking_eff = None if blocking is None else max(blocking, s0)
    for _ in range(n_steps):
        # position advances with the current speed, matching the model's
        # explicit update; only then is the speed adjusted toward the target
        s = s + v * dt
        if blocking_eff is not None:
            s = min(s, blocking_eff)
        out.append(s)
        target = max(0.0, float(v_limit_at(s)))
        if blocking_eff is not None:
            dist = max(0.0, blocking_eff - pad - s)
            v_stop = math.sqrt(2.0 * cfg.decel * dist)
            target = min(target, v_stop)
        if v < target:
            v = min(target, v + cfg.accel * dt)
        else:
            v = max(target, v - cfg.decel * dt)
        v = max(0.0, v)
    return np.asarray(out)


def _lane_speed_limit(world: ScenarioWorld, ref: ReferenceLine, s: float) -> float:
    p = ref.point_at(s)
    best, bv = None, 10.0
    for ln in world.route_lanes():
        d = np.min(np.hypot(*(ln.centerline - p).T))
        if best is None or d < best:
            best, bv = d, ln.speed_limit
    return bv


def _leader_speed_cap(world: ScenarioWorld, ref: ReferenceLine, s_ego: float,
                      half_corridor: float, now: float,
                      cfg: PostplanConfig) -> float:
    """Headway-based speed cap from moving leaders in the corridor."""
    v_cap = math.inf
    for obs in world.obstacles:
        x, y, _ = obs.pose_at(now)
        s, l = ref.project((x, y))
        if s <= s_ego or abs(l) > half_corridor:
            continue
        speed = obs.speed_at(now)
        if speed <= cfg.slow_leader_speed:
            continue  # handled as a corridor carve / block
        gap = s - s_ego - obs.length / 2.0 - cfg.min_gap
        v_follow = max(0.0, gap / cfg.headway)
        v_cap = min(v_cap, max(speed * 0.9, min(v_follow, speed + 1.0)))
    return v_cap


def plan_in_corridor(world: ScenarioWorld, ego: VehicleState, ref: ReferenceLine,
                     l_ref_of_s, now: float, n_steps: int, dt: float,
                     cfg: PostplanConfig = PostplanConfig(),
                     ego_geometry: VehicleGeometry = VehicleGeometry(),
                     learned: Optional[Trajectory] = None,
                     speed_target_of_s=None
                     ) -> tuple[Trajectory, GatekeepDiagnostics]:
    """Corridor -> path QP -> speed profile -> step-feasible trajectory.

    l_ref_of_s maps absolute station to desired lateral offset (the learned
    trajectory's projection, or 0 for centerline tracking). speed_target_of_s
    optionally caps the profile at a guidance speed (the learned plan's);
    safety caps still apply on top.
    """
    corridor = build_corridor(world, ego, ref, learned, now=now, cfg=cfg,
                              ego_geometry=ego_geometry)
    s_ego, l_ego = ref.project((ego.x, ego.y))
    slope0 = math.tan(np.clip(wrap_angle(ego.heading - ref.heading_at(s_ego)),
                              -1.2, 1.2))
    slope0 = float(np.clip(slope0, -cfg.slope_max, cfg.slope_max))
    stations = corridor.stations
    # small shrink absorbs the tracking rollout's one-interval lag, so the
    # executed path stays inside the reported corridor
    slack = 0.08
    roomy = (corridor.upper - corridor.lower) > 4 * slack
    lo = np.where(roomy, corridor.lower + slack, corridor.lower)
    hi = np.where(roomy, corridor.upper - slack, corridor.upper)
    # soft start: tracking lag can leave the ego marginally outside a bound;
    # relax the first stations to include it instead of slamming the path
    l_now = float(np.clip(l_ego, corridor.lower[0], corridor.upper[0]))
    relax_span = 4.0
    for i, s in enumerate(stations):
        gap = s - stations[0]
        if gap > relax_span:
            break
        w_relax = 1.0 - gap / relax_span
        lo[i] = min(lo[i], l_now - 0.2 * w_relax)
        hi[i] = max(hi[i], l_now + 0.2 * w_relax)
    l_ref = np.array([l_ref_of_s(s) for s in stations])
    l_ref = np.clip(l_ref, lo, hi)
    problem = QPProblem(ds=np.diff(stations), l_ref=l_ref, lower=lo, upper=hi,
                        init_l=float(np.clip(l_ego, lo[0], hi[0])),
                        init_slope=slope0, w_ref=cfg.w_ref, w_slope=cfg.w_slope,
                        w_curve=cfg.w_curve, w_jerk=cfg.w_jerk,
                        slope_max=cfg.slope_max, l2_max=cfg.l2_max)
    qp = solve_path_qp(problem)

    # speed caps: lane limit, curvature, leader following; limits ahead are
    # propagated backward through the braking envelope so drops and curves
    # are anticipated instead of discovered
    curv_s, curv_v = ref.curvature_samples()
    v_leader_cap = _leader_speed_cap(world, ref, s_ego,
                                     half_corridor=2.0, now=now, cfg=cfg)

    def _local_cap(s):
        v = _lane_speed_limit(world, ref, s)
        near = (curv_s >= s - 2.0) & (curv_s <= s + 2.0)
        if near.any():
            kmax = float(curv_v[near].max())
            if kmax > 1e-6:
                v = min(v, math.sqrt(cfg.lat_accel_max / kmax))
        return v

    def v_limit_at(s):
        v = _local_cap(s)
        for ahead in np.arange(2.0, 42.0, 2.0):
            cap = _local_cap(s + ahead)
            v = min(v, math.sqrt(cap * cap + 2.0 * cfg.decel * ahead))
        if speed_target_of_s is not None:
            v = min(v, max(0.0, float(speed_target_of_s(s))))
        return min(v, v_leader_cap)

    # one extra interval feeds the tracker's final lookahead
    schedule = speed_profile(ego.speed, n_steps + 1, dt, s_ego, v_limit_at,
                             corridor.blocking_station, cfg)

    # compose path offsets at scheduled stations
    pts = []
    for s in schedule:
        su = float(np.clip(s, stations[0], stations[-1]))
        l = float(np.interp(su, stations, qp.offsets))
        pts.append(ref.offset_point(min(s, ref.length), l))
    pts = np.asarray(pts)
    traj = track_positions(ego, pts, n_steps, dt, ego_geometry.wheelbase)
    diag = GatekeepDiagnostics(fallback=False, qp_iterations=qp.iterations,
                               kkt_residual=qp.kkt_residual,
                               blocking_station=corridor.blocking_station)
    return traj, diag


def safe_stop(ego: VehicleState, n_steps: int, dt: float,
              cfg: PostplanConfig = PostplanConfig(),
              wheelbase: float = 2.8) -> Trajectory:
    """Maximal-comfort straight-line deceleration from the current state."""
    controls = []
    v = ego.speed
    for _ in range(n_steps):
        a = -min(cfg.decel, v / dt)
        controls.append(Control(steer=0.0, accel=a))
        v = max(0.0, v + a * dt)
    return rollout(ego, controls, dt, wheelbase).states


def gatekeep(learned: Trajectory, world: ScenarioWorld, ego: VehicleState,
             route: ReferenceLine, now: float = 0.0,
             cfg: PostplanConfig = PostplanConfig(),
             ego_geometry: VehicleGeometry = VehicleGeometry()
             ) -> tuple[Trajectory, GatekeepDiagnostics]:
    """Re-plan the learned trajectory inside hard bounds; never raises."""
    n_steps = len(learned.states) - 1 if len(learned.states) > 1 else 10
    dt = learned.dt
    try:
        proj = [route.project((st.x, st.y)) for st in learned.states]
        s_arr = np.array([p[0] for p in proj])
        l_arr = np.array([p[1] for p in proj])
        v_arr = np.array([st.speed for st in learned.states])
        order = np.argsort(s_arr)
        s_sorted = s_arr[order]
        l_sorted = l_arr[order]
        v_sorted = v_arr[order]

        def l_ref_of_s(s):
            return float(np.interp(s, s_sorted, l_sorted))

        def speed_target_of_s(s):
            return float(np.interp(s, s_sorted, v_sorted))

        return plan_in_corridor(world, ego, route, l_ref_of_s, now, n_steps, dt,
                                cfg=cfg, ego_geometry=ego_geometry, learned=learned,
                                speed_target_of_s=speed_target_of_s)
    except (CorridorError, QPError, KinematicsError, ValueError) as e:
        traj = safe_stop(ego, n_steps, dt, cfg, ego_geometry.wheelbase)
        return traj, GatekeepDiagnostics(fallback=True, reason=str(e))
