"""Pseudo-LiDAR densification: disparity back-projection, region cropping,
long-tail outlier removal and whole-cloud depth rectification against LiDAR."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

from .boxes import Box2D, Box3D, points_in_box_mask
from .calib import Calibration, image_to_rect, project_velo_xyz, rect_to_velo_xyz
from .errors import EmptyCloud, MissingBaseline, TooFewPoints
from .pointcloud import Frame, PointCloud

DEFAULT_RANGE = ((0.0, 70.0), (-40.0, 40.0), (-3.0, 1.0))


@dataclass(frozen=True)
class DisparityMap:
    """Dense disparity in pixels, row-major (height, width); 0 marks invalid pixels."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] == 0 or vals.shape[1] == 0:
            raise ValueError(f"disparity must be a non-empty 2D grid, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("disparity contains non-finite values")
        if np.any(vals < 0):
            raise ValueError("disparity must be non-negative")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class PseudoPoints(NamedTuple):
    cloud: PointCloud
    pixels: np.ndarray  # (N, 2) integer (u, v) of the generating pixel


def disparity_to_points(calib_left: Calibration, disp: DisparityMap, stride: int = 1) -> PseudoPoints:
    """Back-project every valid pixel (on a ``stride`` lattice) into the velodyne frame.

    Depth follows from ``z = f_u * baseline / d``; pixel centres are at integer
    coordinates.
    """
    if not calib_left.stereo_baseline or calib_left.stereo_baseline <= 0:
        raise MissingBaseline("calibration carries no stereo baseline")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    grid = disp.values[::stride, ::stride]
    rows, cols = np.nonzero(grid > 0)
    d = grid[rows, cols]
    u = cols.astype(np.float64) * stride
    v = rows.astype(np.float64) * stride
    depth = calib_left.f_u * calib_left.stereo_baseline / d
    rect = image_to_rect(calib_left, u, v, depth) if d.size else np.zeros((0, 3))
    cloud = PointCloud(rect_to_velo_xyz(calib_left, rect), Frame.VELODYNE)
    return PseudoPoints(cloud, np.stack([u, v], -1).astype(np.int64))


def box2d_mask(calib: Calibration, cloud: PointCloud, box: Box2D) -> np.ndarray:
    cloud.require(Frame.VELODYNE)
    proj = project_velo_xyz(calib, cloud.xyz)
    x1, y1, x2, y2 = box.corners
    with np.errstate(invalid="ignore"):
        return (proj.depth > 0) & (proj.u >= x1) & (proj.u <= x2) & (proj.v >= y1) & (proj.v <= y2)


def crop_points_by_box2d(calib: Calibration, cloud: PointCloud, box: Box2D) -> PointCloud:
    """Points in front of the camera whose projection lands inside ``box`` (edges included)."""
    return cloud.subset(box2d_mask(calib, cloud, box))


def crop_points_by_box3d(cloud: PointCloud, box: Box3D) -> PointCloud:
    cloud.require(Frame.VELODYNE)
    return cloud.subset(points_in_box_mask(box, cloud.xyz))


def range_crop(cloud: PointCloud, x=DEFAULT_RANGE[0], y=DEFAULT_RANGE[1], z=DEFAULT_RANGE[2]) -> PointCloud:
    cloud.require(Frame.VELODYNE)
    p = cloud.xyz
    mask = ((p[:, 0] >= x[0]) & (p[:, 0] <= x[1]) & (p[:, 1] >= y[0]) & (p[:, 1] <= y[1])
            & (p[:, 2] >= z[0]) & (p[:, 2] <= z[1]))
    return cloud.subset(mask)


# --- statistical outlier removal ------------------------------------------------

class FilterResult(NamedTuple):
    cloud: PointCloud
    removed: np.ndarray  # indices into the input cloud


def mean_knn_distances(xyz: np.ndarray, k: int) -> np.ndarray:
    """Mean distance from each point to its ``k`` nearest other points."""
    dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
    return dist[:, 1:].mean(axis=1)


def statistical_filter(cloud: PointCloud, k: int = 20, sigma_mult: float = 1.0) -> FilterResult:
    """Drop points whose mean k-NN distance exceeds ``mu + sigma_mult * sigma``.

    ``mu`` and ``sigma`` are the mean and (population) standard deviation of the
    per-point statistic over the whole cloud.
    """
    n = len(cloud)
    if n <= k:
        raise TooFewPoints(f"statistical filter with k={k} needs more than {k} points, got {n}")
    stat = mean_knn_distances(cloud.xyz, k)
    mu, sigma = stat.mean(), stat.std()
    # slack absorbs rounding when all statistics are equal in exact arithmetic
    gate = mu + sigma_mult * sigma + 1e-12 * max(mu, 1.0)
    outlier = stat > gate
    return FilterResult(cloud.subset(~outlier), np.flatnonzero(outlier))


# --- depth rectification -----------------------------------------------------------

@dataclass(frozen=True)
class RectificationResult:
    offset: float
    residual: float
    k_used: int


_INVPHI = (np.sqrt(5.0) - 1) / 2


def _golden_section(f, a: float, b: float, tol: float = 1e-4, max_iter: int = 100) -> tuple[float, float]:
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def depth_objective(tree: cKDTree, xyz: np.ndarray, k: int):
    """Mean over pseudo points of the mean distance to their ``k`` nearest GT points, as a function of shift.

    The sum the minimisation is defined on is this value times the point count;
    the mean is 1-Lipschitz in a unit-axis shift, which :func:`grid_argmin` uses.
    """
    def objective(shift: np.ndarray) -> float:
        dist, _ = tree.query(xyz + shift, k=k, workers=-1)
        dist = dist.reshape(len(xyz), -1)
        return float(dist.mean(axis=1).mean())
    return objective


def grid_argmin(f, grid: np.ndarray, lipschitz: float = 1.0, coarse_every: int = 10) -> tuple[int, np.ndarray]:
    """Exact argmin of ``f`` over ``grid`` for a ``lipschitz``-continuous ``f``.

    Grid points whose Lipschitz lower bound already exceeds the best value seen
    are never evaluated; the returned index equals that of a full scan (first
    minimum on ties). Returns the index and the values array (NaN where skipped).
    """
    n = grid.shape[0]
    values = np.full(n, np.nan)
    bound = np.full(n, -np.inf)
    slack = 1e-9

    def visit(i):
        values[i] = f(grid[i])
        np.maximum(bound, values[i] - lipschitz * np.abs(grid - grid[i]), out=bound)

    for i in range(0, n, coarse_every):
        visit(i)
    if np.isnan(values[n - 1]):
        visit(n - 1)
    while True:
        best = np.nanmin(values)
        open_ = np.isnan(values) & (bound <= best + slack)
        if not open_.any():
            break
        cand = np.flatnonzero(open_)
        visit(cand[np.argmin(bound[cand])])
    best = np.nanmin(values)
    return int(np.flatnonzero(values == best)[0]), values


def rectify_depth(pseudo: PointCloud, gt: PointCloud, calib: Optional[Calibration] = None, k: int = 5,
                  search_range: float = 3.0, step: float = 0.05,
                  direction: Optional[np.ndarray] = None) -> tuple[PointCloud, RectificationResult]:
    """Shift ``pseudo`` as a whole along the viewing axis to best fit ``gt``.

    Minimises the sum over pseudo points of the mean distance to their ``k``
    nearest GT points. The objective is piecewise smooth in the shift (nearest
    neighbours change), so it is scanned on a ``step`` grid over
    ``[-search_range, search_range]`` and the best bracket is refined by
    golden-section search. The axis is the rectified camera's depth direction:
    taken from ``calib`` for velodyne clouds, or ``direction`` when given.
    """
    if len(pseudo) == 0 or len(gt) == 0:
        raise EmptyCloud("rectify_depth needs non-empty pseudo and GT clouds")
    gt.require(pseudo.frame)
    if direction is None:
        if pseudo.frame == Frame.RECT:
            direction = np.array([0.0, 0.0, 1.0])
        elif calib is not None:
            direction = calib.depth_axis_velo
        else:
            raise ValueError("velodyne clouds need a calibration or an explicit direction")
    axis = np.asarray(direction, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k_used = min(k, len(gt))
    objective = depth_objective(cKDTree(gt.xyz), pseudo.xyz, k_used)

    def f(delta: float) -> float:
        return objective(delta * axis)

    n_steps = int(round(search_range / step))
    grid = step * np.arange(-n_steps, n_steps + 1)
    best, values = grid_argmin(f, grid)
    delta, value = float(grid[best]), float(values[best])
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    if hi > lo:
        d_ref, v_ref = _golden_section(f, float(lo), float(hi), tol=step * 1e-3)
        if v_ref < value:
            delta, value = float(d_ref), float(v_ref)
    moved = pseudo.with_xyz(pseudo.xyz + delta * axis)
    return moved, RectificationResult(delta, value, k_used)
