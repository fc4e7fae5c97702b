"""Differentiable vehicle rasterizer: three oriented Gaussian kernels.

A vehicle state paints the grid with the max of three unnormalized 2D
Gaussians placed along the body axis at longitudinal offsets {-l/3, 0, +l/3},
with standard deviations (sigma_l, sigma_w) = (alpha*l/3, alpha*w) in meters.
Peaks are 1.0 and the distributions are deliberately not truncated at the box
boundary; a truncated mode (zero outside the footprint) exists for ablation.

Everything is evaluated in metric space at cell centers, so grid resolution
never enters the quadratic form. Gradients w.r.t. the generating (x, y, phi)
are analytic subgradients of the max (ties broken by lowest kernel index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import GridSpec, VehicleGeometry, VehicleState, image_to_world

DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class KernelParams:
    """Resolved Gaussian kernel parameters for one vehicle state."""

    alpha: float
    sigma_l: float  # meters
    sigma_w: float  # meters
    centers: np.ndarray  # (3, 2) world points
    offsets: np.ndarray  # (3,) longitudinal body offsets

    @staticmethod
    def from_state(state: VehicleState, geom: VehicleGeometry, alpha: float) -> "KernelParams":
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        sigma_l = alpha * geom.length / 3.0
        sigma_w = alpha * geom.width
        offsets = np.array([-geom.length / 3.0, 0.0, geom.length / 3.0])
        h = np.array([math.cos(state.heading), math.sin(state.heading)])
        centers = np.array([state.x, state.y]) + offsets[:, None] * h
        return KernelParams(alpha=alpha, sigma_l=sigma_l, sigma_w=sigma_w,
                            centers=centers, offsets=offsets)


@dataclass(frozen=True)
class RasterField:
    """Rasterized occupancy plus per-cell gradients w.r.t. the source state."""

    grid: GridSpec
    values: np.ndarray  # (H, W) in [0, 1]
    grads: np.ndarray  # (3, H, W): d/dx, d/dy, d/dphi
    argmax_kernel: np.ndarray  # (H, W) winning kernel index


def field_at_points(points, state: VehicleState, geom: VehicleGeometry,
                    alpha: float = DEFAULT_ALPHA, truncated: bool = False,
                    dtype=np.float64):
    """Evaluate the field and its state-gradients at arbitrary world points.

    Returns (values, grads, argmax) with values shaped like points[..., 0]
    and grads with a leading axis of 3 for (d/dx, d/dy, d/dphi).
    """
    kp = KernelParams.from_state(state, geom, alpha)
    p = np.asarray(points, dtype=dtype)
    base = p.shape[:-1]
    flat = p.reshape(-1, 2)

    c, s = math.cos(state.heading), math.sin(state.heading)
    h = np.array([c, s], dtype=dtype)
    n = np.array([-s, c], dtype=dtype)
    inv_sl2 = 1.0 / (kp.sigma_l * kp.sigma_l)
    inv_sw2 = 1.0 / (kp.sigma_w * kp.sigma_w)

    d = flat[None, :, :] - kp.centers[:, None, :].astype(dtype)  # (3, M, 2)
    bl = d @ h  # (3, M) longitudinal body offsets
    bw = d @ n  # lateral
    q = bl * bl * inv_sl2 + bw * bw * inv_sw2
    vals = np.exp(-0.5 * q)

    win = np.argmax(vals, axis=0)  # ties: lowest index (argmax convention)
    m = np.arange(flat.shape[0])
    v = vals[win, m]
    blw, bww = bl[win, m], bw[win, m]
    off = kp.offsets.astype(dtype)[win]

    # dq/dx, dq/dy via d(body offsets)/d(x, y) = (-h, -n) per component.
    gl = 2.0 * blw * inv_sl2
    gw = 2.0 * bww * inv_sw2
    dq_dx = gl * (-c) + gw * s
    dq_dy = gl * (-s) + gw * (-c)
    # d(bl)/dphi = bw; d(bw)/dphi = -bl - offset (center moves with the body).
    dq_dphi = gl * bww + gw * (-blw - off)
    common = -0.5 * v
    grads = np.stack([common * dq_dx, common * dq_dy, common * dq_dphi])

    if truncated:
        half_l, half_w = geom.length / 2.0, geom.width / 2.0
        rel = flat - np.array([state.x, state.y], dtype=dtype)
        inside = (np.abs(rel @ h) <= half_l) & (np.abs(rel @ n) <= half_w)
        v = np.where(inside, v, 0.0)
        grads = np.where(inside[None, :], grads, 0.0)
    else:
        # exp underflows to 0 far out; floor keeps the long tail strictly
        # positive without measurably changing any value
        v = np.maximum(v, np.finfo(dtype).tiny)

    return v.reshape(base), grads.reshape((3,) + base), win.reshape(base)


def cell_centers_world(grid: GridSpec, ego_frame: VehicleState,
                       dtype=np.float64) -> np.ndarray:
    """(H, W, 2) world coordinates of all cell centers for an ego pose."""
    cols = np.arange(grid.width_px, dtype=dtype)
    rows = np.arange(grid.height_px, dtype=dtype)
    ci, rj = np.meshgrid(cols, rows)
    px = np.stack([ci, rj], axis=-1)
    return image_to_world(px, ego_frame, grid).astype(dtype)


def rasterize(state: VehicleState, geom: VehicleGeometry, grid: GridSpec,
              ego_frame: VehicleState, alpha: float = DEFAULT_ALPHA,
              truncated: bool = False, dtype=np.float64) -> RasterField:
    """Rasterize one vehicle state onto the ego-centric grid."""
    pts = cell_centers_world(grid, ego_frame, dtype=dtype)
    vals, grads, win = field_at_points(pts, state, geom, alpha=alpha,
                                       truncated=truncated, dtype=dtype)
    return RasterField(grid=grid, values=vals, grads=grads, argmax_kernel=win)


def rasterize_gradients(state: VehicleState, geom: VehicleGeometry, grid: GridSpec,
                        ego_frame: VehicleState, alpha: float = DEFAULT_ALPHA,
                        truncated: bool = False) -> np.ndarray:
    """Per-cell (3, H, W) partials of the rasterized value w.r.t. (x, y, phi)."""
    return rasterize(state, geom, grid, ego_frame, alpha=alpha,
                     truncated=truncated).grads
