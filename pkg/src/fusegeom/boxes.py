"""Box value types, projection of 3D boxes into the image, IoU kernels and NMS.

Box3D lives in the velodyne frame: (x, y, z) is the geometric centre, ``l`` runs
along the heading, ``w`` across it, ``h`` along velodyne z, and ``theta`` is the
yaw in the x-y plane.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .calib import Calibration, project_rect_xyz, velo_to_rect_xyz
from .errors import FullyBehindCamera, LengthMismatch, OutOfView
from .pointcloud import Frame, PointCloud

AREA_EPS = 1e-12
NEAR_PLANE = 0.1  # metres; box edges crossing the camera plane are clipped here

# corner order: bottom face (z - h/2) then top face, each counter-clockwise in the
# box frame starting from the front-left corner (+l/2, +w/2)
_CORNER_SIGNS = np.array([
    [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1],
    [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1],
], dtype=np.float64) * 0.5

_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
          (0, 4), (1, 5), (2, 6), (3, 7))


def wrap_angle(theta: float) -> float:
    """Map an angle into [-pi, pi); values already inside are returned unchanged."""
    if -math.pi <= theta < math.pi:
        return float(theta)
    return float((theta + math.pi) % (2 * math.pi) - math.pi)


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.theta])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box in centre/size form (pixels)."""

    x: float
    y: float
    l: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "l", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.l > 0 and self.h > 0):
            raise ValueError(f"2D box size must be positive, got l={self.l} h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box2D":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2)."""
        return (self.x - self.l / 2, self.y - self.h / 2, self.x + self.l / 2, self.y + self.h / 2)

    @property
    def area(self) -> float:
        return self.l * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.l, self.h])

    @classmethod
    def from_array(cls, a) -> "Box2D":
        return cls(*(float(v) for v in a))


def boxes3d_array(boxes: Sequence[Box3D]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def boxes2d_array(boxes: Sequence[Box2D]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])


def _rot_z(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def corners_3d(boxes: np.ndarray) -> np.ndarray:
    """(N, 7) box array -> (N, 8, 3) corners in the documented order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    local = _CORNER_SIGNS[None] * boxes[:, None, 3:6]
    rot = _rot_z(boxes[:, 6])
    return np.einsum("nij,nkj->nki", rot, local) + boxes[:, None, :3]


def box3d_corners(box: Box3D) -> np.ndarray:
    return corners_3d(box.as_array())[0]


def bev_corners(box: Box3D) -> np.ndarray:
    """Ground-plane footprint as a counter-clockwise (4, 2) polygon."""
    return box3d_corners(box)[:4, :2]


# --- projection ----------------------------------------------------------------

def _envelope(points_rect: np.ndarray, calib: Calibration) -> np.ndarray:
    proj = project_rect_xyz(calib, points_rect)
    return np.array([proj.u.min(), proj.v.min(), proj.u.max(), proj.v.max()])


def _clip_to_near_plane(corners_rect: np.ndarray) -> np.ndarray:
    z = corners_rect[:, 2]
    if not np.any(z > 0):
        raise FullyBehindCamera("all corners have non-positive depth")
    if np.all(z >= NEAR_PLANE):
        return corners_rect
    if not np.any(z >= NEAR_PLANE):
        return corners_rect[z > 0]
    pts = [corners_rect[z >= NEAR_PLANE]]
    for i, j in _EDGES:
        zi, zj = z[i], z[j]
        if (zi >= NEAR_PLANE) != (zj >= NEAR_PLANE):
            t = (NEAR_PLANE - zi) / (zj - zi)
            pts.append((corners_rect[i] + t * (corners_rect[j] - corners_rect[i]))[None])
    return np.concatenate(pts)


def _clip_to_image(env: np.ndarray, image_size: Optional[tuple[int, int]]) -> np.ndarray:
    if image_size is None:
        return env
    width, height = image_size
    x1, y1, x2, y2 = env
    out = np.array([max(x1, 0.0), max(y1, 0.0), min(x2, width - 1.0), min(y2, height - 1.0)])
    return out


def project_box3d_corners_envelope(calib: Calibration, box: Box3D,
                                   image_size: Optional[tuple[int, int]] = None) -> np.ndarray:
    """(x1, y1, x2, y2) envelope of the projected box, before conversion to Box2D."""
    corners = velo_to_rect_xyz(calib, box3d_corners(box))
    env = _envelope(_clip_to_near_plane(corners), calib)
    return _clip_to_image(env, image_size)


def project_box3d_to_box2d(calib: Calibration, box: Box3D,
                           image_size: Optional[tuple[int, int]] = None) -> Box2D:
    """Axis-aligned image envelope of a 3D box.

    Corners behind the camera are handled by clipping the box edges at a near
    plane rather than dropping them. ``image_size`` is (width, height); when
    given, the envelope is clipped to the image and ``OutOfView`` is raised if
    nothing is left.
    """
    x1, y1, x2, y2 = project_box3d_corners_envelope(calib, box, image_size)
    if not (x2 > x1 and y2 > y1):
        raise OutOfView("projected box does not intersect the image")
    return Box2D.from_corners(x1, y1, x2, y2)


def project_boxes3d_to_2d(calib: Calibration, boxes: np.ndarray,
                          image_size: Optional[tuple[int, int]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of an (N, 7) box array.

    Returns (N, 4) centre/size boxes and a validity mask; invalid rows (fully
    behind the camera or outside the image) hold NaN.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    n = boxes.shape[0]
    out = np.full((n, 4), np.nan)
    valid = np.zeros(n, dtype=bool)
    if n == 0:
        return out, valid
    corners = velo_to_rect_xyz(calib, corners_3d(boxes).reshape(-1, 3)).reshape(n, 8, 3)
    easy = np.all(corners[:, :, 2] >= NEAR_PLANE, axis=1)
    env = np.full((n, 4), np.nan)
    if easy.any():
        proj = project_rect_xyz(calib, corners[easy].reshape(-1, 3))
        u = proj.u.reshape(-1, 8)
        v = proj.v.reshape(-1, 8)
        env[easy] = np.stack([u.min(1), v.min(1), u.max(1), v.max(1)], -1)
    for i in np.flatnonzero(~easy):
        try:
            env[i] = _envelope(_clip_to_near_plane(corners[i]), calib)
        except FullyBehindCamera:
            continue
    if image_size is not None:
        width, height = image_size
        env[:, 0] = np.maximum(env[:, 0], 0.0)
        env[:, 1] = np.maximum(env[:, 1], 0.0)
        env[:, 2] = np.minimum(env[:, 2], width - 1.0)
        env[:, 3] = np.minimum(env[:, 3], height - 1.0)
    with np.errstate(invalid="ignore"):
        valid = (env[:, 2] > env[:, 0]) & (env[:, 3] > env[:, 1])
    out[valid] = np.stack([
        (env[valid, 0] + env[valid, 2]) / 2, (env[valid, 1] + env[valid, 3]) / 2,
        env[valid, 2] - env[valid, 0], env[valid, 3] - env[valid, 1]], -1)
    return out, valid


# --- IoU -------------------------------------------------------------------------

def iou_2d(a: Box2D, b: Box2D) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(inter / (a.area + b.area - inter), 1.0)


def iou_2d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) centre/size arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a1, a2 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b1, b2 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    wh = np.minimum(a2[:, None], b2[None]) - np.maximum(a1[:, None], b1[None])
    inter = np.clip(wh[..., 0], 0, None) * np.clip(wh[..., 1], 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    return np.minimum(inter / (area_a[:, None] + area_b[None] - inter), 1.0)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex_polygon(subject: list, clip: np.ndarray) -> list:
    """Sutherland-Hodgman: the part of ``subject`` inside the CCW convex ``clip``."""
    out = subject
    n = len(clip)
    for k in range(n):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - cur_side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return out


def convex_intersection_area(p: np.ndarray, q: np.ndarray) -> float:
    poly = clip_convex_polygon([tuple(v) for v in p], q)
    area = polygon_area(np.asarray(poly)) if len(poly) >= 3 else 0.0
    return area if area >= AREA_EPS else 0.0


def _bev_footprint(arr: np.ndarray) -> np.ndarray:
    x, y, _, l, w, _, t = arr
    c, s = math.cos(t), math.sin(t)
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
    return local @ np.array([[c, s], [-s, c]]) + np.array([x, y])


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return convex_intersection_area(_bev_footprint(a.as_array()), _bev_footprint(b.as_array()))


def _ratio(inter: float, union: float) -> float:
    # rounding can push a fully nested intersection a few ulp past the union
    return min(inter / union, 1.0)


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return _ratio(inter, a.l * a.w + b.l * b.w - inter)


def iou_3d(a: Box3D, b: Box3D) -> float:
    dz = min(a.z + a.h / 2, b.z + b.h / 2) - max(a.z - a.h / 2, b.z - b.h / 2)
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter == 0.0:
        return 0.0
    return _ratio(inter, a.volume + b.volume - inter)


def _candidate_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # circumscribed circles must overlap for a non-zero BEV intersection
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    return d < (ra[:, None] + rb[None])


def iou_matrix_3d(a: np.ndarray, b: np.ndarray, mode: str = "3d") -> np.ndarray:
    """Pairwise BEV ("bev") or 3D ("3d") IoU of (N, 7) and (M, 7) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((a.shape[0], b.shape[0]))
    if out.size == 0:
        return out
    fa = [_bev_footprint(r) for r in a]
    fb = [_bev_footprint(r) for r in b]
    for i, j in zip(*np.nonzero(_candidate_pairs(a, b))):
        inter = convex_intersection_area(fa[i], fb[j])
        if inter == 0.0:
            continue
        if mode == "bev":
            out[i, j] = _ratio(inter, a[i, 3] * a[i, 4] + b[j, 3] * b[j, 4] - inter)
        else:
            dz = min(a[i, 2] + a[i, 5] / 2, b[j, 2] + b[j, 5] / 2) - max(a[i, 2] - a[i, 5] / 2, b[j, 2] - b[j, 5] / 2)
            if dz <= 0:
                continue
            vi = inter * dz
            out[i, j] = _ratio(vi, a[i, 3] * a[i, 4] * a[i, 5] + b[j, 3] * b[j, 4] * b[j, 5] - vi)
    return out


# --- NMS -------------------------------------------------------------------------

def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties keep the lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def nms_rotated(boxes: Sequence[Box3D] | np.ndarray, scores, iou_threshold: float = 0.85) -> list[int]:
    """Greedy BEV non-maximum suppression.

    A box is dropped when its BEV IoU with an already kept box is strictly
    greater than ``iou_threshold``. Returns kept indices in selection order.
    """
    arr = boxes if isinstance(boxes, np.ndarray) else boxes3d_array(boxes)
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.shape[0] != scores.shape[0]:
        raise LengthMismatch(f"{arr.shape[0]} boxes but {scores.shape[0]} scores")
    n = arr.shape[0]
    order = score_order(scores)
    feet = [_bev_footprint(r) for r in arr]
    areas = arr[:, 3] * arr[:, 4]
    radius = 0.5 * np.hypot(arr[:, 3], arr[:, 4])
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        near = rest[np.hypot(arr[rest, 0] - arr[i, 0], arr[rest, 1] - arr[i, 1]) < radius[rest] + radius[i]]
        for j in near:
            inter = convex_intersection_area(feet[i], feet[j])
            if inter > 0 and _ratio(inter, areas[i] + areas[j] - inter) > iou_threshold:
                suppressed[j] = True
    return keep


# --- canonical frame --------------------------------------------------------------

class CanonicalPoints(NamedTuple):
    xyz: np.ndarray
    distance: np.ndarray


def to_box_frame(box: Box3D, xyz: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.theta), math.sin(box.theta)
    d = np.asarray(xyz, dtype=np.float64).reshape(-1, 3) - box.center
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], -1)


def canonical_transform(proposal: Box3D, points: PointCloud) -> CanonicalPoints:
    """Express points in the proposal's centred, yaw-aligned frame.

    Also returns each point's Euclidean distance to the sensor origin, taken
    in the original frame.
    """
    points.require(Frame.VELODYNE)
    return CanonicalPoints(to_box_frame(proposal, points.xyz), np.linalg.norm(points.xyz, axis=1))


def points_in_box_mask(box: Box3D, xyz: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Inclusive containment test; ``margin`` grows the box on every side."""
    local = to_box_frame(box, xyz)
    half = np.array([box.l, box.w, box.h]) / 2 + margin
    return np.all(np.abs(local) <= half, axis=1)
