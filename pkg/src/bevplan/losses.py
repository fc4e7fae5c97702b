"""Imitation and rasterized task losses with analytic state gradients.

The imitation loss is a per-step weighted L2 norm of the state residual with
the heading component wrapped. Task losses overlap the rasterized vehicle
with binary forbidden-cell masks, normalized by cell count. The total loss
optionally drops the imitation term per sample (imitation dropout); task
terms are always included.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import GridSpec, Trajectory, VehicleGeometry, VehicleState, wrap_angle
from . import raster_diff
from .kinematics import RolloutResult

TASK_NAMES = ("obstacle", "route", "road", "signal")


@dataclass(frozen=True)
class LossWeights:
    imitation_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 0.1)
    task_weight: float = 10.0
    imitation_dropout_p: float = 0.5

    def __post_init__(self):
        if any(w < 0 for w in self.imitation_weights) or self.task_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.imitation_dropout_p <= 1.0:
            raise ValueError("dropout probability must lie in [0, 1]")


@dataclass
class LossBreakdown:
    imit: float
    obstacle: float
    route: float
    road: float
    signal: float
    total: float
    state_grads: np.ndarray  # (T, 4) d(total)/d(pred state)

    @property
    def task_sum(self) -> float:
        return self.obstacle + self.route + self.road + self.signal


def imitation_loss(pred: Trajectory, truth: Trajectory,
                   weights: LossWeights) -> tuple[float, np.ndarray]:
    """Sum over steps of ||lambda * (s_t - s_hat_t)||_2, heading wrapped.

    Returns (loss, gradient w.r.t. pred states) with gradient shape (T, 4).
    The gradient at an exact-equality step is the zero vector.
    """
    if len(pred.states) != len(truth.states):
        raise ValueError(f"length mismatch {len(pred.states)} != {len(truth.states)}")
    if abs(pred.dt - truth.dt) > 1e-12:
        raise ValueError("dt mismatch between prediction and ground truth")
    lam = np.asarray(weights.imitation_weights, dtype=float)
    res = pred.states_array() - truth.states_array()
    res[:, 2] = wrap_angle(res[:, 2])
    weighted = lam[None, :] * res
    norms = np.linalg.norm(weighted, axis=1)
    grads = np.zeros_like(weighted)
    nz = norms > 0
    grads[nz] = (lam[None, :] * weighted[nz]) / norms[nz, None]
    return float(norms.sum()), grads


def task_loss(fields: Sequence[raster_diff.RasterField],
              mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean masked overlap summed over timesteps: sum_t mean(G_t * T).

    Returns (loss, gradient w.r.t. each generating state) with gradient shape
    (len(fields), 4); the speed column is identically zero.
    """
    mask = np.asarray(mask)
    total = 0.0
    grads = np.zeros((len(fields), 4))
    for t, f in enumerate(fields):
        if mask.shape != f.values.shape:
            raise ValueError(f"mask shape {mask.shape} mismatches field {f.values.shape}")
        cells = float(mask.size)
        total += float((f.values * mask).sum()) / cells
        grads[t, :3] = (f.grads * mask[None, :, :]).sum(axis=(1, 2)) / cells
    return total, grads


def task_loss_states(states: np.ndarray, geom: VehicleGeometry, grid: GridSpec,
                     ego_frame: VehicleState, mask: np.ndarray,
                     alpha: float = raster_diff.DEFAULT_ALPHA,
                     truncated: bool = False,
                     dtype=np.float64) -> tuple[float, np.ndarray]:
    """task_loss evaluated only at masked cells (same formula, sparse path).

    states is (T, 4); returns (loss, (T, 4) gradient). Only cells with a
    nonzero mask value contribute to either, so evaluation is restricted to
    them.
    """
    mask = np.asarray(mask)
    cells = float(mask.size)
    idx = np.nonzero(mask)
    grads = np.zeros((len(states), 4))
    if idx[0].size == 0:
        return 0.0, grads
    centers = raster_diff.cell_centers_world(grid, ego_frame, dtype=dtype)
    pts = centers[idx]
    w = mask[idx].astype(dtype)
    total = 0.0
    for t, row in enumerate(np.asarray(states, dtype=float)):
        st = VehicleState.from_array(row)
        vals, g, _ = raster_diff.field_at_points(pts, st, geom, alpha=alpha,
                                                 truncated=truncated, dtype=dtype)
        total += float((vals * w).sum()) / cells
        grads[t, :3] = (g * w[None, :]).sum(axis=1) / cells
    return total, grads


def total_loss(pred: Trajectory, truth: Trajectory,
               fields: Sequence[raster_diff.RasterField], masks,
               weights: LossWeights, dropout_draw: float) -> LossBreakdown:
    """Combine imitation and task losses per the training objective.

    masks is any object exposing binary .obstacle/.route/.road/.signal
    images on the fields' grid (see scene.TaskMasks). The imitation term is
    multiplied by zero when dropout_draw falls below the dropout
    probability; dropout_draw is an explicit uniform [0, 1) input so there
    is no hidden randomness here.
    """
    if not 0.0 <= dropout_draw < 1.0:
        raise ValueError("dropout_draw must lie in [0, 1)")
    keep = 0.0 if dropout_draw < weights.imitation_dropout_p else 1.0
    imit, imit_g = imitation_loss(pred, truth, weights)
    per_task = {}
    task_g = np.zeros((len(pred.states), 4))
    for name in TASK_NAMES:
        val, g = task_loss(fields, getattr(masks, name))
        per_task[name] = val
        task_g += g
    total = keep * imit + weights.task_weight * sum(per_task.values())
    grads = keep * imit_g + weights.task_weight * task_g
    return LossBreakdown(imit=imit, obstacle=per_task["obstacle"],
                         route=per_task["route"], road=per_task["road"],
                         signal=per_task["signal"], total=total,
                         state_grads=grads)


def total_loss_control_gradient(result: RolloutResult, truth: Trajectory,
                                geom: VehicleGeometry, grid: GridSpec,
                                ego_frame: VehicleState, masks,
                                weights: LossWeights, dropout_draw: float,
                                alpha: float = raster_diff.DEFAULT_ALPHA,
                                truncated: bool = False
                                ) -> tuple[LossBreakdown, np.ndarray]:
    """End-to-end analytic gradient of the total loss w.r.t. the controls.

    The rollout's decoded waypoints (states after the start) are compared
    against truth (same convention: truth.states excludes the start state)
    and rasterized for the task terms; gradients chain through the rollout
    jacobians. Returns (breakdown, (N, 2) control gradient).
    """
    decoded = Trajectory(dt=result.states.dt, states=result.states.states[1:])
    fields = [raster_diff.rasterize(s, geom, grid, ego_frame, alpha=alpha,
                                    truncated=truncated)
              for s in decoded.states]
    breakdown = total_loss(decoded, truth, fields, masks, weights, dropout_draw)
    full_grads = np.zeros((len(result.states.states), 4))
    full_grads[1:] = breakdown.state_grads
    return breakdown, result.control_gradient(full_grads)
