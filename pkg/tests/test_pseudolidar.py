import math

import numpy as np
import pytest

from fusegeom.boxes import Box2D, Box3D, to_box_frame
from fusegeom.calib import Calibration, project_velo_to_image, rect_to_velo_xyz, velo_to_rect_xyz
from fusegeom.errors import EmptyCloud, FrameMismatch, MissingBaseline, TooFewPoints
from fusegeom.pointcloud import Frame, PointCloud
from fusegeom.pseudolidar import (DisparityMap, crop_points_by_box2d, crop_points_by_box3d,
                                  depth_objective, disparity_to_points, grid_argmin, mean_knn_distances,
                                  range_crop, rectify_depth, statistical_filter)

from conftest import kitti_like_calibration, random_box, random_calibration


def test_disparity_closed_form():
    c = Calibration(f_u=720, f_v=720, c_u=10, c_v=5, b_x=0.06, stereo_baseline=0.54)
    disp = np.zeros((11, 21))
    disp[5, 10] = 72
    pts = disparity_to_points(c, DisparityMap(disp))
    rect = velo_to_rect_xyz(c, pts.cloud.xyz)
    np.testing.assert_allclose(rect, [[0.06, 0, 5.4]], atol=1e-12)
    assert pts.pixels.tolist() == [[10, 5]]


def test_disparity_all_zero():
    c = Calibration(f_u=720, f_v=720, c_u=10, c_v=5, stereo_baseline=0.54)
    assert len(disparity_to_points(c, DisparityMap(np.zeros((4, 4)))).cloud) == 0


def test_disparity_requires_baseline():
    with pytest.raises(MissingBaseline):
        disparity_to_points(Calibration(f_u=1, f_v=1, c_u=0, c_v=0), DisparityMap(np.ones((2, 2))))


def test_disparity_map_validation():
    for bad in (np.zeros((0, 3)), np.array([[1.0, -1.0]]), np.array([[np.nan]])):
        with pytest.raises(ValueError):
            DisparityMap(bad)


def render_plane(calib, normal, offset, width, height):
    """Disparity of the plane normal . p = offset (rect frame), ray by ray."""
    disp = np.zeros((height, width))
    for v in range(height):
        for u in range(width):
            a = (u - calib.c_u) / calib.f_u
            b = (v - calib.c_v) / calib.f_v
            # p = (b_x + a z, b z, z)
            denom = normal[0] * a + normal[1] * b + normal[2]
            z = (offset - normal[0] * calib.b_x) / denom
            if z > 0:
                disp[v, u] = calib.f_u * calib.stereo_baseline / z
    return disp


def test_render_then_invert_plane(rng):
    for _ in range(5):
        calib = random_calibration(rng)
        n = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0])
        n /= np.linalg.norm(n)
        disp = render_plane(calib, n, rng.uniform(5, 30), 40, 30)
        pts = disparity_to_points(calib, DisparityMap(disp))
        rect = velo_to_rect_xyz(calib, pts.cloud.xyz)
        residual = rect @ n
        assert np.ptp(residual) < 1e-6


def test_disparity_round_trip_pixels(rng):
    calib = random_calibration(rng)
    disp = rng.uniform(1, 100, (30, 40))
    pts = disparity_to_points(calib, DisparityMap(disp), stride=2)
    proj = project_velo_to_image(calib, pts.cloud)
    assert np.abs(proj.u - pts.pixels[:, 0]).max() < 1e-6
    assert np.abs(proj.v - pts.pixels[:, 1]).max() < 1e-6
    z = calib.f_u * calib.stereo_baseline / disp[::2, ::2][pts.pixels[:, 1] // 2, pts.pixels[:, 0] // 2]
    assert np.abs(proj.depth - z).max() < 1e-9


def test_crop_2d_matches_oracle(rng):
    calib = kitti_like_calibration()
    cloud = PointCloud(rng.uniform([-10, -20, -3], [60, 20, 2], (3000, 3)))
    box = Box2D(600, 180, 300, 120)
    kept = crop_points_by_box2d(calib, cloud, box)
    x1, y1, x2, y2 = box.corners
    expected = []
    for p in cloud.xyz:
        q = project_velo_to_image(calib, PointCloud([p]))[0]
        if q.depth > 0 and x1 <= q.u <= x2 and y1 <= q.v <= y2:
            expected.append(p)
    np.testing.assert_array_equal(kept.xyz, np.array(expected).reshape(-1, 3))
    again = crop_points_by_box2d(calib, kept, box)
    np.testing.assert_array_equal(again.xyz, kept.xyz)


def test_crop_2d_examples():
    c = Calibration.identity(f_u=700, f_v=700, c_u=600, c_v=180)
    box = Box2D(600, 180, 10, 10)
    assert len(crop_points_by_box2d(c, PointCloud([[0.0, 0, 10]]), box)) == 1
    assert len(crop_points_by_box2d(c, PointCloud([[0.0, 0, -10]]), box)) == 0


def test_crop_3d(rng):
    box = Box3D(5, 2, -1, 4, 2, 1.5, 0.6)
    assert len(crop_points_by_box3d(PointCloud([[5, 2, -1.0]]), box)) == 1
    far = box.center + 2 * np.array([box.l * math.cos(box.theta), box.l * math.sin(box.theta), 0])
    assert len(crop_points_by_box3d(PointCloud([far]), box)) == 0
    for _ in range(10):
        b = random_box(rng)
        pts = rng.uniform(-6, 6, (500, 3))
        local = to_box_frame(b, pts)
        expected = pts[(np.abs(local) <= np.array([b.l, b.w, b.h]) / 2).all(1)]
        np.testing.assert_array_equal(crop_points_by_box3d(PointCloud(pts), b).xyz, expected)
    with pytest.raises(FrameMismatch):
        crop_points_by_box3d(PointCloud([[0, 0, 0.0]], Frame.RECT), box)


def test_range_crop():
    pts = PointCloud([[0, 0, 0.0], [80, 0, 0], [70, 40, 1], [70, -40, -3], [10, 0, 1.0001]])
    np.testing.assert_array_equal(range_crop(pts).xyz, [[0, 0, 0], [70, 40, 1], [70, -40, -3]])


def test_mean_knn_matches_brute_force(rng):
    xyz = rng.normal(size=(400, 3))
    d = np.linalg.norm(xyz[:, None] - xyz[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    expected = np.sort(d, axis=1)[:, :7].mean(1)
    np.testing.assert_allclose(mean_knn_distances(xyz, 7), expected, rtol=1e-12)


def test_filter_far_point(rng):
    ball = rng.normal(size=(100, 3))
    ball = 0.1 * ball / np.linalg.norm(ball, axis=1, keepdims=True) * rng.uniform(0, 1, (100, 1)) ** (1 / 3)
    cloud = PointCloud(np.vstack([ball, [[10.0, 0, 0]]]))
    res = statistical_filter(cloud)
    assert res.removed.tolist() == [100]
    assert len(res.cloud) == 100


def test_filter_zero_variance():
    t = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    ring = np.stack([np.cos(t), np.sin(t), np.zeros_like(t)], -1) * 5 + [3, -2, 1]
    for m in (1.0, 2.0):
        assert statistical_filter(PointCloud(ring), k=20, sigma_mult=m).removed.size == 0


def test_filter_too_few_points():
    with pytest.raises(TooFewPoints):
        statistical_filter(PointCloud(np.zeros((20, 3))), k=20)


def test_filter_permutation_invariant(rng):
    xyz = np.vstack([rng.normal(size=(300, 3)), rng.uniform(-20, 20, (10, 3))])
    perm = rng.permutation(len(xyz))
    a = statistical_filter(PointCloud(xyz))
    b = statistical_filter(PointCloud(xyz[perm]))
    assert sorted(perm[b.removed].tolist()) == a.removed.tolist()


def test_grid_argmin_matches_full_scan(rng):
    grid = 0.05 * np.arange(-60, 61)
    for _ in range(30):
        a = rng.normal(0, 1.5, 7)
        w = rng.dirichlet(np.ones(7))
        f = lambda x: float(np.sum(w * np.abs(x - a)) + 0.1 * math.sin(5 * x) / 5)
        full = np.array([f(x) for x in grid])
        # f is at most 1.1-Lipschitz
        idx, values = grid_argmin(f, grid, lipschitz=1.1)
        assert idx == int(np.argmin(full))
        seen = ~np.isnan(values)
        np.testing.assert_array_equal(values[seen], full[seen])


def test_rectify_recovers_shift(rng):
    calib = kitti_like_calibration()
    gt = PointCloud(rng.uniform([15, -2, -1.5], [19, 2, 0], (800, 3)))
    axis = calib.depth_axis_velo
    pseudo = gt.with_xyz(gt.xyz + 0.5 * axis)
    moved, res = rectify_depth(pseudo, gt, calib)
    assert abs(res.offset + 0.5) < 0.05
    assert res.k_used == 5
    from scipy.spatial import cKDTree
    # with K > 1 the floor is the cloud's own K-NN spacing; K = 1 reaches zero
    floor = depth_objective(cKDTree(gt.xyz), gt.xyz, 5)(np.zeros(3))
    assert res.residual == pytest.approx(floor, abs=1e-12)
    _, res1 = rectify_depth(pseudo, gt, calib, k=1)
    assert abs(res1.offset + 0.5) < 1e-3 and res1.residual < 1e-3
    np.testing.assert_allclose(moved.xyz, pseudo.xyz + res.offset * axis)


def test_rectify_identity(rng):
    gt = PointCloud(rng.uniform(-2, 2, (300, 3)))
    _, res = rectify_depth(gt, gt, direction=[1.0, 0, 0], k=1)
    assert res.offset == 0.0 and res.residual == 0.0


def test_rectify_single_point():
    gt = PointCloud([[10.0, 1.0, -1.0]])
    pseudo = PointCloud([[11.234, 1.3, -1.0]])
    _, res = rectify_depth(pseudo, gt, direction=[1.0, 0, 0])
    assert abs(res.offset + 1.234) < 1e-3
    assert res.k_used == 1


def test_rectify_never_worsens(rng):
    gt = PointCloud(rng.uniform(-3, 3, (400, 3)))
    pseudo = PointCloud(rng.uniform(-3, 3, (300, 3)) + [0, 0, 0.7])
    _, res = rectify_depth(pseudo, gt, direction=[0, 0, 1.0])
    from scipy.spatial import cKDTree
    f0 = depth_objective(cKDTree(gt.xyz), pseudo.xyz, 5)(np.zeros(3))
    assert res.residual <= f0


def test_rectify_errors():
    with pytest.raises(EmptyCloud):
        rectify_depth(PointCloud(np.zeros((0, 3))), PointCloud([[0, 0, 0.0]]), direction=[1, 0, 0])
    with pytest.raises(ValueError):
        rectify_depth(PointCloud([[0, 0, 0.0]]), PointCloud([[0, 0, 0.0]]))
