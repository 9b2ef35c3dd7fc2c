import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from fusegeom.boxes import Box3D
from fusegeom.calib import Calibration

ACCEPTANCE_LINES: list[str] = []


def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def random_calibration(rng, baseline=True) -> Calibration:
    return Calibration(
        f_u=rng.uniform(300, 1200), f_v=rng.uniform(300, 1200),
        c_u=rng.uniform(200, 800), c_v=rng.uniform(100, 400),
        b_x=rng.uniform(-0.5, 0.5),
        rect_rotation=random_rotation(rng),
        velo_to_cam_rotation=random_rotation(rng),
        velo_to_cam_translation=rng.uniform(-2, 2, 3),
        stereo_baseline=rng.uniform(0.2, 0.8) if baseline else None,
    )


def kitti_like_calibration() -> Calibration:
    from fusegeom.dataio import default_calibration
    return default_calibration()


def random_box(rng, spread=3.0, center=(0.0, 0.0, 0.0)) -> Box3D:
    c = np.asarray(center) + rng.uniform(-spread, spread, 3)
    return Box3D(c[0], c[1], c[2], rng.uniform(0.5, 5), rng.uniform(0.5, 3), rng.uniform(0.5, 2),
                 rng.uniform(-np.pi, np.pi))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
