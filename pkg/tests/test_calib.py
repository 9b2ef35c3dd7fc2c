import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusegeom.calib import (Calibration, format_kitti_calib, image_grid_coords, image_to_rect,
                            parse_kitti_calib, project_velo_to_image, rect_to_velo, velo_to_rect)
from fusegeom.errors import FrameMismatch, MalformedNumber, MissingRecord, NonPositiveDepth
from fusegeom.pointcloud import Frame, PointCloud

from conftest import random_calibration

KITTI_TEXT = """P0: 721.5 0 609.6 0 0 721.5 172.9 0 0 0 1 0
P1: 721.5 0 609.6 -387.6 0 721.5 172.9 0 0 0 1 0
P2: 721.5 0 609.6 44.85 0 721.5 172.9 0 0 0 1 0
P3: 721.5 0 609.6 -339.5 0 721.5 172.9 0 0 0 1 0
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 0 -1 0 0 0 0 -1 -0.08 1 0 0 -0.27
Tr_imu_to_velo: 1 0 0 0 0 1 0 0 0 0 1 0
"""


def homogeneous_oracle(calib: Calibration, x: np.ndarray) -> np.ndarray:
    """Build the full 3x4 velodyne->image matrix and apply it to homogeneous points."""
    k = np.array([[calib.f_u, 0, calib.c_u, -calib.f_u * calib.b_x],
                  [0, calib.f_v, calib.c_v, 0],
                  [0, 0, 1, 0]])
    rect4 = np.eye(4)
    rect4[:3, :3] = calib.rect_rotation
    tr4 = np.eye(4)
    tr4[:3, :3] = calib.velo_to_cam_rotation
    tr4[:3, 3] = calib.velo_to_cam_translation
    y = (k @ rect4 @ tr4) @ np.hstack([x, np.ones((len(x), 1))]).T
    return np.stack([y[0] / y[2], y[1] / y[2], y[2]], -1)


def test_parse_kitti_fields():
    c = parse_kitti_calib(KITTI_TEXT)
    assert c.f_u == 721.5 and c.c_u == 609.6 and c.f_v == 721.5 and c.c_v == 172.9
    assert c.b_x == pytest.approx(-44.85 / 721.5, abs=1e-15)
    assert c.stereo_baseline == pytest.approx(339.5 / 721.5 + 44.85 / 721.5, abs=1e-12)
    np.testing.assert_array_equal(c.rect_rotation, np.eye(3))
    np.testing.assert_array_equal(c.velo_to_cam_translation, [0, -0.08, -0.27])


def test_parse_other_camera():
    c = parse_kitti_calib(KITTI_TEXT, camera=0)
    assert c.b_x == 0.0
    assert c.stereo_baseline == pytest.approx(387.6 / 721.5)


def test_missing_record():
    text = "\n".join(l for l in KITTI_TEXT.splitlines() if not l.startswith("Tr_velo"))
    with pytest.raises(MissingRecord):
        parse_kitti_calib(text)


def test_malformed_number():
    with pytest.raises(MalformedNumber):
        parse_kitti_calib(KITTI_TEXT.replace("172.9", "17x", 1))


def test_non_orthonormal_rotation_rejected():
    with pytest.raises(ValueError):
        parse_kitti_calib(KITTI_TEXT.replace("R0_rect: 1 0 0", "R0_rect: 1.01 0 0"))


def test_format_parse_round_trip(rng):
    for _ in range(20):
        c = random_calibration(rng)
        back = parse_kitti_calib(format_kitti_calib(c), camera=c.camera)
        for name in ("f_u", "f_v", "c_u", "c_v"):
            assert getattr(back, name) == getattr(c, name)
        assert back.b_x == pytest.approx(c.b_x, abs=1e-15)
        assert back.stereo_baseline == pytest.approx(c.stereo_baseline, rel=1e-12)
        np.testing.assert_array_equal(back.rect_rotation, c.rect_rotation)


def test_velo_to_rect_identity():
    out = velo_to_rect(Calibration.identity(), PointCloud([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(out.xyz, [[1, 2, 3]])
    assert out.frame == Frame.RECT


def test_velo_to_rect_translation():
    c = Calibration.identity(velo_to_cam_translation=[0, 0, 5])
    np.testing.assert_array_equal(velo_to_rect(c, PointCloud([[0.0, 0, 0]])).xyz, [[0, 0, 5]])


def test_velo_to_rect_matches_matrix_oracle(rng):
    for _ in range(50):
        c = random_calibration(rng)
        x = rng.uniform(-50, 50, (20, 3))
        expected = np.array([c.rect_rotation @ (c.velo_to_cam_rotation @ p + c.velo_to_cam_translation) for p in x])
        np.testing.assert_allclose(velo_to_rect(c, PointCloud(x)).xyz, expected, rtol=0, atol=1e-12)


def test_frame_mismatch():
    c = Calibration.identity()
    with pytest.raises(FrameMismatch):
        velo_to_rect(c, PointCloud([[1.0, 2, 3]], Frame.RECT))
    with pytest.raises(FrameMismatch):
        rect_to_velo(c, PointCloud([[1.0, 2, 3]], Frame.VELODYNE))
    with pytest.raises(FrameMismatch):
        project_velo_to_image(c, PointCloud([[1.0, 2, 3]], Frame.RECT))


def test_rect_to_velo_examples():
    np.testing.assert_array_equal(rect_to_velo(Calibration.identity(), PointCloud([[1.0, 2, 3]], Frame.RECT)).xyz, [[1, 2, 3]])
    c = Calibration.identity(velo_to_cam_translation=[0, 0, 5])
    np.testing.assert_array_equal(rect_to_velo(c, PointCloud([[0, 0, 5.0]], Frame.RECT)).xyz, [[0, 0, 0]])


def test_rect_velo_round_trip(rng):
    c = random_calibration(rng)
    p = PointCloud(rng.uniform(-80, 80, (1000, 3)), Frame.RECT)
    back = velo_to_rect(c, rect_to_velo(c, p))
    assert np.abs(back.xyz - p.xyz).max() < 1e-9


def test_project_identity():
    proj = project_velo_to_image(Calibration.identity(), PointCloud([[2.0, 4.0, 2.0]]))
    assert tuple(proj[0]) == (1.0, 2.0, 2.0, True)


def test_project_optical_axis():
    c = Calibration(f_u=700, f_v=700, c_u=600, c_v=180)
    p = project_velo_to_image(c, PointCloud([[0.0, 0, 10]]))[0]
    assert (p.u, p.v, p.depth) == (600.0, 180.0, 10.0)


def test_project_flags_points_behind():
    proj = project_velo_to_image(Calibration.identity(), PointCloud([[1.0, 1, 2], [1.0, 1, -2], [0, 0, 0.0]]))
    assert list(proj.in_front) == [True, False, False]
    assert len(proj) == 3


def test_project_matches_homogeneous_oracle(rng):
    for _ in range(100):
        c = random_calibration(rng)
        x = rng.uniform(-30, 30, (50, 3))
        proj = project_velo_to_image(c, PointCloud(x))
        oracle = homogeneous_oracle(c, x)
        ok = np.abs(oracle[:, 2]) > 1e-3
        np.testing.assert_allclose(proj.u[ok], oracle[ok, 0], rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(proj.v[ok], oracle[ok, 1], rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(proj.depth, oracle[:, 2], atol=1e-12)


def test_image_to_rect_examples():
    c = Calibration(f_u=720, f_v=720, c_u=600, c_v=180)
    np.testing.assert_array_equal(image_to_rect(c, 600, 180, 5.0), [0, 0, 5])
    assert image_to_rect(c, 672, 180, 10.0)[0] == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(NonPositiveDepth):
        image_to_rect(c, 1, 1, 0.0)
    with pytest.raises(NonPositiveDepth):
        image_to_rect(c, [1, 2], [1, 2], [1.0, -1.0])


def test_image_round_trip(rng):
    c = random_calibration(rng)
    u, v, d = rng.uniform(0, 1242, 1000), rng.uniform(0, 375, 1000), rng.uniform(0.5, 80, 1000)
    rect = image_to_rect(c, u, v, d)
    velo = rect_to_velo(c, PointCloud(rect, Frame.RECT))
    proj = project_velo_to_image(c, velo)
    assert np.abs(proj.u - u).max() < 1e-9
    assert np.abs(proj.v - v).max() < 1e-9
    assert np.abs(proj.depth - d).max() < 1e-9


@settings(max_examples=200, deadline=None)
@given(x=st.floats(-50, 50), y=st.floats(-50, 50), z=st.floats(0.5, 80), lam=st.floats(0.01, 100))
def test_projection_scale_invariant(x, y, z, lam):
    c = Calibration(f_u=721.5, f_v=721.5, c_u=609.6, c_v=172.9, b_x=0.0)
    from fusegeom.calib import project_rect_xyz
    a = project_rect_xyz(c, np.array([[x, y, z]]))
    b = project_rect_xyz(c, np.array([[x, y, z]]) * lam)
    assert a.u[0] == pytest.approx(b.u[0], rel=1e-9, abs=1e-9)
    assert a.v[0] == pytest.approx(b.v[0], rel=1e-9, abs=1e-9)


def test_feature_map_grid_coords():
    c = Calibration(f_u=700, f_v=700, c_u=600, c_v=180)
    pts = PointCloud([[0.0, 0, 10]])
    np.testing.assert_allclose(image_grid_coords(c, pts, 1), [[600, 180]])
    # pixel 600 at stride 4 falls at the centre-aligned position (600.5 / 4) - 0.5
    np.testing.assert_allclose(image_grid_coords(c, pts, 4), [[149.625, 44.625]])


def test_invalid_focal_rejected():
    with pytest.raises(ValueError):
        Calibration(f_u=0, f_v=1, c_u=0, c_v=0)
