"""Camera/LiDAR calibration and the velodyne -> rectified camera -> image chain.

A point ``x`` in the velodyne frame maps to rectified camera coordinates

    x_r = R_rect (R_velo_cam x + t_velo_cam)

and from there to pixels through the per-camera projection row

    [f_u  0   c_u  -f_u b_x]
    [0    f_v c_v   0      ]
    [0    0   1     0      ]

followed by the perspective divide, i.e. ``u = f_u (x_r - b_x) / z_r + c_u`` and
``v = f_v y_r / z_r + c_v``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Optional

import numpy as np

from .errors import MalformedNumber, MissingRecord, NonPositiveDepth
from .pointcloud import Frame, PointCloud

ORTHONORMAL_TOL = 1e-6

_PARTNER = {0: 1, 1: 0, 2: 3, 3: 2}


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


def _check_rotation(name: str, r: np.ndarray) -> None:
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > ORTHONORMAL_TOL:
        raise ValueError(f"{name} is not orthonormal (max |R^T R - I| = {err:.3g})")


@dataclass(frozen=True)
class Calibration:
    """Parameters of one rectified camera plus the LiDAR extrinsics."""

    f_u: float
    f_v: float
    c_u: float
    c_v: float
    b_x: float = 0.0
    rect_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    velo_to_cam_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    velo_to_cam_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stereo_baseline: Optional[float] = None
    camera: int = 2

    def __post_init__(self):
        for name in ("f_u", "f_v", "c_u", "c_v", "b_x"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.f_u > 0 and self.f_v > 0):
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "rect_rotation", _frozen(self.rect_rotation, (3, 3)))
        object.__setattr__(self, "velo_to_cam_rotation", _frozen(self.velo_to_cam_rotation, (3, 3)))
        object.__setattr__(self, "velo_to_cam_translation", _frozen(self.velo_to_cam_translation, (3,)))
        _check_rotation("rect_rotation", self.rect_rotation)
        _check_rotation("velo_to_cam_rotation", self.velo_to_cam_rotation)
        if self.stereo_baseline is not None:
            object.__setattr__(self, "stereo_baseline", float(self.stereo_baseline))

    @classmethod
    def identity(cls, **overrides) -> "Calibration":
        """Unit focal lengths, zero principal point, identity extrinsics."""
        base = dict(f_u=1.0, f_v=1.0, c_u=0.0, c_v=0.0)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "Calibration":
        return replace(self, **changes)

    @property
    def projection_matrix(self) -> np.ndarray:
        """The 3x4 intrinsic row block applied to homogeneous rectified points."""
        return np.array([
            [self.f_u, 0.0, self.c_u, -self.f_u * self.b_x],
            [0.0, self.f_v, self.c_v, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ])

    @property
    def velo_to_rect_rotation(self) -> np.ndarray:
        return self.rect_rotation @ self.velo_to_cam_rotation

    @property
    def velo_to_rect_translation(self) -> np.ndarray:
        return self.rect_rotation @ self.velo_to_cam_translation

    @property
    def depth_axis_velo(self) -> np.ndarray:
        """Unit vector of the rectified camera's viewing axis, in velodyne coordinates."""
        return self.velo_to_rect_rotation.T @ np.array([0.0, 0.0, 1.0])


class ImagePoint(NamedTuple):
    u: float
    v: float
    depth: float
    in_front: bool


@dataclass(frozen=True)
class ImagePoints:
    """Vectorized result of a forward projection.

    Points with non-positive depth are kept and flagged through ``in_front``;
    their ``u``/``v`` are whatever the divide produces and must not be trusted.
    """

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray

    @property
    def in_front(self) -> np.ndarray:
        return self.depth > 0

    def __len__(self) -> int:
        return self.u.shape[0]

    def __getitem__(self, i: int) -> ImagePoint:
        return ImagePoint(float(self.u[i]), float(self.v[i]), float(self.depth[i]), bool(self.depth[i] > 0))

    def __iter__(self) -> Iterator[ImagePoint]:
        return (self[i] for i in range(len(self)))

    @property
    def uv(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


# --- parsing -----------------------------------------------------------------

def _read_records(text: str) -> dict[str, np.ndarray]:
    records = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            values = np.array([float(tok) for tok in rest.split()], dtype=np.float64)
        except ValueError as exc:
            raise MalformedNumber(f"line {lineno} ({key.strip()}): {exc}") from None
        records[key.strip()] = values
    return records


def _take(records: dict, names: tuple[str, ...], size: int) -> np.ndarray:
    for name in names:
        if name in records:
            values = records[name]
            if values.size != size:
                raise MalformedNumber(f"{name}: expected {size} values, got {values.size}")
            return values
    raise MissingRecord(f"calibration record {names[0]} is missing")


def _b_x(p: np.ndarray) -> float:
    return -p[0, 3] / p[0, 0]


def parse_kitti_calib(text: str, camera: int = 2) -> Calibration:
    """Parse a KITTI object-benchmark calibration file for one camera.

    Only the first row of the 4th column of ``P<camera>`` enters the model; the
    small y/z offsets some KITTI files carry there are ignored.
    """
    if camera not in _PARTNER:
        raise ValueError(f"camera index must be 0..3, got {camera}")
    records = _read_records(text)
    projections = {i: _take(records, (f"P{i}",), 12).reshape(3, 4) for i in range(4)}
    rect = _take(records, ("R0_rect", "R_rect"), 9).reshape(3, 3)
    tr = _take(records, ("Tr_velo_to_cam", "Tr_velo_cam"), 12).reshape(3, 4)

    p = projections[camera]
    if p[0, 0] <= 0 or p[1, 1] <= 0:
        raise MalformedNumber(f"P{camera} has non-positive focal length")
    partner = projections[_PARTNER[camera]]
    baseline = abs(_b_x(partner) - _b_x(p)) if partner[0, 0] > 0 else None
    return Calibration(
        f_u=p[0, 0], f_v=p[1, 1], c_u=p[0, 2], c_v=p[1, 2], b_x=_b_x(p),
        rect_rotation=rect,
        velo_to_cam_rotation=tr[:, :3],
        velo_to_cam_translation=tr[:, 3],
        stereo_baseline=baseline or None,
        camera=camera,
    )


def format_kitti_calib(calib: Calibration) -> str:
    """Render ``calib`` in KITTI text form; ``parse_kitti_calib`` recovers it exactly.

    Both stereo pairs get the same intrinsics and offsets, since a single-camera
    ``Calibration`` carries nothing else.
    """
    left_is_self = calib.camera % 2 == 0
    baseline = calib.stereo_baseline or 0.0
    b_self = calib.b_x
    b_other = b_self + baseline if left_is_self else b_self - baseline

    def p_row(b):
        return [calib.f_u, 0.0, calib.c_u, -calib.f_u * b, 0.0, calib.f_v, calib.c_v, 0.0, 0.0, 0.0, 1.0, 0.0]

    rows = {}
    for cam in range(4):
        same_side = (cam % 2 == 0) == left_is_self
        rows[f"P{cam}"] = p_row(b_self if same_side else b_other)
    rows["R0_rect"] = calib.rect_rotation.ravel().tolist()
    tr = np.hstack([calib.velo_to_cam_rotation, calib.velo_to_cam_translation[:, None]])
    rows["Tr_velo_to_cam"] = tr.ravel().tolist()
    return "".join(f"{k}: {' '.join(repr(float(x)) for x in v)}\n" for k, v in rows.items())


# --- frame transforms ----------------------------------------------------------

def velo_to_rect_xyz(calib: Calibration, xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    cam = xyz @ calib.velo_to_cam_rotation.T + calib.velo_to_cam_translation
    return cam @ calib.rect_rotation.T


def rect_to_velo_xyz(calib: Calibration, xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    cam = xyz @ calib.rect_rotation
    return (cam - calib.velo_to_cam_translation) @ calib.velo_to_cam_rotation


def velo_to_rect(calib: Calibration, points: PointCloud) -> PointCloud:
    points.require(Frame.VELODYNE)
    return points.with_xyz(velo_to_rect_xyz(calib, points.xyz), Frame.RECT)


def rect_to_velo(calib: Calibration, points: PointCloud) -> PointCloud:
    points.require(Frame.RECT)
    return points.with_xyz(rect_to_velo_xyz(calib, points.xyz), Frame.VELODYNE)


def project_rect_xyz(calib: Calibration, xyz: np.ndarray) -> ImagePoints:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = calib.f_u * (x - calib.b_x) / z + calib.c_u
        v = calib.f_v * y / z + calib.c_v
    return ImagePoints(u, v, z.copy())


def project_velo_xyz(calib: Calibration, xyz: np.ndarray) -> ImagePoints:
    return project_rect_xyz(calib, velo_to_rect_xyz(calib, xyz))


def project_velo_to_image(calib: Calibration, points: PointCloud) -> ImagePoints:
    points.require(Frame.VELODYNE)
    return project_velo_xyz(calib, points.xyz)


def image_to_rect(calib: Calibration, u, v, depth) -> np.ndarray:
    """Back-project pixel(s) at the given rectified depth(s).

    Scalars give a (3,) point, arrays an (N, 3) array.
    """
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    if np.any(~(depth > 0)):
        raise NonPositiveDepth("inverse projection needs depth > 0")
    x = (u - calib.c_u) * depth / calib.f_u + calib.b_x
    y = (v - calib.c_v) * depth / calib.f_v
    return np.stack([x, y, depth], axis=-1)


def image_to_velo(calib: Calibration, u, v, depth) -> np.ndarray:
    return rect_to_velo_xyz(calib, image_to_rect(calib, u, v, depth))


def image_grid_coords(calib: Calibration, points: PointCloud, stride: int) -> np.ndarray:
    """Feature-map (column, row) coordinates of velodyne points for a map downsampled by ``stride``.

    Pixel centres sit at integer coordinates at both resolutions (half-pixel
    aligned resampling), hence ``(u + 0.5) / stride - 0.5``.
    """
    proj = project_velo_to_image(calib, points)
    return np.stack([(proj.u + 0.5) / stride - 0.5, (proj.v + 0.5) / stride - 0.5], axis=-1)
