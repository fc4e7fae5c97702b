import math

import numpy as np
import pytest

from bevplan.core import GridSpec, VehicleGeometry, VehicleState
from bevplan.raster_diff import (KernelParams, field_at_points, rasterize,
                                 rasterize_gradients)

GRID = GridSpec(200, 200, 0.2, (100.0, 160.0))
GEOM = VehicleGeometry(length=4.8, width=2.1, wheelbase=2.8)
EGO0 = VehicleState(0, 0, 0, 0)


def test_sigma_values():
    kp = KernelParams.from_state(VehicleState(0, 0, 0, 0), GEOM, alpha=0.5)
    assert kp.sigma_l == pytest.approx(0.8)
    assert kp.sigma_w == pytest.approx(1.05)


def test_kernel_center_placement():
    st = VehicleState(3.0, -1.0, 0.7, 5.0)
    kp = KernelParams.from_state(st, GEOM, alpha=0.5)
    h = np.array([math.cos(0.7), math.sin(0.7)])
    assert kp.centers[0] == pytest.approx(np.array([3.0, -1.0]) - 1.6 * h)
    assert kp.centers[1] == pytest.approx([3.0, -1.0])
    assert kp.centers[2] == pytest.approx(np.array([3.0, -1.0]) + 1.6 * h)


def test_peak_value_at_centers():
    st = VehicleState(1.0, 2.0, 0.4, 0.0)
    kp = KernelParams.from_state(st, GEOM, alpha=0.5)
    vals, _, _ = field_at_points(kp.centers, st, GEOM, alpha=0.5)
    assert vals == pytest.approx([1.0, 1.0, 1.0], abs=1e-12)


def test_one_sigma_lateral_offset():
    st = VehicleState(0, 0, 0, 0)
    kp = KernelParams.from_state(st, GEOM, alpha=0.5)
    pt = kp.centers[1] + np.array([0.0, kp.sigma_w])
    vals, _, _ = field_at_points(pt[None, :], st, GEOM, alpha=0.5)
    assert vals[0] == pytest.approx(math.exp(-0.5), abs=1e-9)


def test_one_sigma_on_sampled_grid():
    # geometry chosen so a cell center sits at the 1-sigma lateral offset
    # (sigma_w = 1.0 m = 5 cells); sampling tolerance per the 0.02 contract
    geom = VehicleGeometry(length=4.8, width=2.0, wheelbase=2.8)
    st = VehicleState(0.0, 0.0, 0.0, 0.0)
    field = rasterize(st, geom, GRID, EGO0, alpha=0.5)
    from bevplan.core import world_to_image
    kp = KernelParams.from_state(st, geom, alpha=0.5)
    assert kp.sigma_w == pytest.approx(1.0)
    px = world_to_image(np.array([0.0, kp.sigma_w]), EGO0, GRID)
    col, row = int(round(px[0])), int(round(px[1]))
    assert field.values[row, col] == pytest.approx(math.exp(-0.5), abs=0.02)


def test_rotation_equivariance():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-4, 4, size=(50, 2))
    st0 = VehicleState(0, 0, 0, 0)
    v0, _, _ = field_at_points(pts, st0, GEOM)
    phi = 1.234
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    stR = VehicleState(0, 0, phi, 0)
    vR, _, _ = field_at_points(pts @ rot.T, stR, GEOM)
    assert np.max(np.abs(v0 - vR)) < 1e-12


def test_max_dominance_over_kernels():
    rng = np.random.default_rng(1)
    for _ in range(20):
        st = VehicleState(rng.uniform(-5, 5), rng.uniform(-5, 5),
                          rng.uniform(-3, 3), 0.0)
        pts = rng.uniform(-12, 12, size=(200, 2))
        vals, _, _ = field_at_points(pts, st, GEOM)
        kp = KernelParams.from_state(st, GEOM, alpha=0.5)
        h = np.array([math.cos(st.heading), math.sin(st.heading)])
        n = np.array([-h[1], h[0]])
        for k in range(3):
            d = pts - kp.centers[k]
            q = (d @ h / kp.sigma_l) ** 2 + (d @ n / kp.sigma_w) ** 2
            single = np.exp(-0.5 * q)
            assert np.all(vals >= single - 1e-12)


def test_values_strictly_positive_untruncated():
    field = rasterize(VehicleState(0, 0, 0.3, 0), GEOM, GRID, EGO0)
    assert np.all(field.values > 0.0)
    assert np.all(field.values <= 1.0)


def test_monotone_decay_along_ray():
    st = VehicleState(0, 0, 0, 0)
    ts = np.linspace(2.0, 18.0, 60)  # beyond the front kernel at +1.6 m
    pts = np.stack([ts, np.zeros_like(ts)], axis=-1)
    vals, _, _ = field_at_points(pts, st, GEOM)
    assert np.all(np.diff(vals) < 0)


def test_truncated_matches_inside_zero_outside():
    st = VehicleState(0.6, -0.4, 0.5, 0.0)
    full = rasterize(st, GEOM, GRID, EGO0, truncated=False)
    trunc = rasterize(st, GEOM, GRID, EGO0, truncated=True)
    h = np.array([math.cos(st.heading), math.sin(st.heading)])
    n = np.array([-h[1], h[0]])
    from bevplan.raster_diff import cell_centers_world
    rel = cell_centers_world(GRID, EGO0) - np.array([st.x, st.y])
    inside = (np.abs(rel @ h) <= GEOM.length / 2) & (np.abs(rel @ n) <= GEOM.width / 2)
    assert np.array_equal(trunc.values[inside], full.values[inside])
    assert np.all(trunc.values[~inside] == 0.0)


def test_gradient_zero_at_center():
    st = VehicleState(2.0, 1.0, 0.9, 0.0)
    kp = KernelParams.from_state(st, GEOM, alpha=0.5)
    _, grads, _ = field_at_points(kp.centers[1][None, :], st, GEOM)
    assert grads[:, 0] == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)


def test_heading_gradient_zero_at_own_center():
    st = VehicleState(0, 0, 0.3, 0)
    kp = KernelParams.from_state(st, GEOM, alpha=0.5)
    for k in range(3):
        _, grads, win = field_at_points(kp.centers[k][None, :], st, GEOM)
        # the winning kernel at its own center is itself
        assert win[0] == k or math.isclose(float(grads[2, 0]), 0.0, abs_tol=1e-9)
        if win[0] == k:
            assert grads[2, 0] == pytest.approx(0.0, abs=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    h = 1e-6
    checked = 0
    for _ in range(120):
        st_arr = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3),
                           rng.uniform(-3, 3), 0.0])
        st = VehicleState.from_array(st_arr)
        pt = rng.uniform(-8, 8, size=(1, 2))
        vals, grads, win = field_at_points(pt, st, GEOM)
        # exclude argmax ties: perturbations must not switch kernels
        kp = KernelParams.from_state(st, GEOM, alpha=0.5)
        hvec = np.array([math.cos(st.heading), math.sin(st.heading)])
        nvec = np.array([-hvec[1], hvec[0]])
        d = pt - kp.centers
        q = (d @ hvec / kp.sigma_l) ** 2 + (d @ nvec / kp.sigma_w) ** 2
        singles = np.exp(-0.5 * q).ravel()
        order = np.sort(singles)[::-1]
        if order[0] - order[1] < 1e-6 * max(order[0], 1e-300):
            continue
        checked += 1
        for comp in range(3):
            fd = 0.0
            for sign in (+1, -1):
                pert = st_arr.copy()
                pert[comp] += sign * h
                v, _, _ = field_at_points(pt, VehicleState.from_array(pert), GEOM)
                fd += sign * float(v[0]) / (2 * h)
            scale = max(abs(fd), 1e-3)
            assert abs(float(grads[comp, 0]) - fd) / scale < 1e-5
    assert checked >= 80


def test_translation_covariance_analytic():
    st = VehicleState(1.0, -2.0, 0.8, 0.0)
    rng = np.random.default_rng(9)
    pts = rng.uniform(-6, 6, size=(100, 2))
    dxy = np.array([0.37, -1.21])
    shifted = VehicleState(st.x + dxy[0], st.y + dxy[1], st.heading, 0.0)
    v0, _, _ = field_at_points(pts, st, GEOM)
    v1, _, _ = field_at_points(pts + dxy, shifted, GEOM)
    assert np.max(np.abs(v0 - v1)) < 1e-12


def test_rasterize_gradients_shape():
    g = rasterize_gradients(VehicleState(0, 0, 0, 0), GEOM, GRID, EGO0)
    assert g.shape == (3, 200, 200)
    assert np.all(np.isfinite(g))
