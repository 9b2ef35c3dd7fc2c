"""Joint 2D/3D anchors: seeding, labeling, filtering, target encoding, proposal assignment."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .boxes import (Box2D, Box3D, boxes2d_array, boxes3d_array, iou_2d_matrix, iou_matrix_3d,
                    nms_rotated, project_boxes3d_to_2d, score_order, wrap_angle)
from .calib import Calibration
from .errors import LengthMismatch
from .pointcloud import Frame, PointCloud

DEFAULT_ORIENTATIONS = (0.0, math.pi / 2)


@dataclass(frozen=True)
class AnchorTemplate:
    l: float = 3.9
    w: float = 1.6
    h: float = 1.5

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError("anchor template sizes must be positive")


@dataclass(frozen=True)
class JointAnchor:
    box3d: Box3D
    box2d: Box2D
    source_point_index: int


class AnchorLabel(str, enum.Enum):
    FOREGROUND = "foreground"
    BACKGROUND = "background"
    IGNORED = "ignored"


class SeedResult(NamedTuple):
    anchors: list[JointAnchor]
    dropped: int


def seed_anchor_arrays(points: np.ndarray, calib: Calibration, template: AnchorTemplate = AnchorTemplate(),
                       orientations: Sequence[float] = DEFAULT_ORIENTATIONS,
                       image_size: Optional[tuple[int, int]] = None):
    """Array form of :func:`seed_anchors`.

    Returns (boxes3d (M, 7), boxes2d (M, 4), source index (M,), dropped count).
    Rows are point-major: all orientations of point 0, then point 1, ...
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n, k = points.shape[0], len(orientations)
    boxes = np.empty((n * k, 7))
    boxes[:, :3] = np.repeat(points, k, axis=0)
    boxes[:, 3:6] = (template.l, template.w, template.h)
    boxes[:, 6] = np.tile([wrap_angle(t) for t in orientations], n)
    src = np.repeat(np.arange(n), k)
    b2d, valid = project_boxes3d_to_2d(calib, boxes, image_size)
    return boxes[valid], b2d[valid], src[valid], int((~valid).sum())


def seed_anchors(foreground_points: PointCloud, template: AnchorTemplate, calib: Calibration,
                 orientations: Sequence[float] = DEFAULT_ORIENTATIONS,
                 image_size: Optional[tuple[int, int]] = None) -> SeedResult:
    """One anchor per (foreground point, orientation), centred on the point.

    Anchors whose projection is not visible are dropped and counted.
    """
    foreground_points.require(Frame.VELODYNE)
    b3, b2, src, dropped = seed_anchor_arrays(foreground_points.xyz, calib, template, orientations, image_size)
    anchors = [JointAnchor(Box3D.from_array(a), Box2D.from_array(b), int(i)) for a, b, i in zip(b3, b2, src)]
    return SeedResult(anchors, dropped)


def label_2d_anchors(anchors: Sequence[Box2D] | np.ndarray, gts: Sequence[Box2D] | np.ndarray,
                     lo: float = 0.3, hi: float = 0.5) -> list[AnchorLabel]:
    if not lo < hi:
        raise ValueError("lo must be below hi")
    a = anchors if isinstance(anchors, np.ndarray) else boxes2d_array(anchors)
    g = gts if isinstance(gts, np.ndarray) else boxes2d_array(gts)
    if len(a) == 0:
        return []
    best = iou_2d_matrix(a, g).max(axis=1) if len(g) else np.zeros(len(a))
    labels = []
    for m in best:
        if m < lo:
            labels.append(AnchorLabel.BACKGROUND)
        elif m > hi:
            labels.append(AnchorLabel.FOREGROUND)
        else:
            labels.append(AnchorLabel.IGNORED)
    return labels


def joint_filter(labels2d: Sequence[AnchorLabel], fg3d_mask) -> list[int]:
    fg3d_mask = np.asarray(fg3d_mask, dtype=bool).reshape(-1)
    if len(labels2d) != fg3d_mask.shape[0]:
        raise LengthMismatch(f"{len(labels2d)} labels but {fg3d_mask.shape[0]} mask entries")
    return [i for i, (lab, fg) in enumerate(zip(labels2d, fg3d_mask))
            if lab == AnchorLabel.FOREGROUND and fg]


# --- regression targets -------------------------------------------------------------

@dataclass(frozen=True)
class RegressionTargets3D:
    dx: float
    dy: float
    dz: float
    dl: float
    dw: float
    dh: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dl, self.dw, self.dh, self.dtheta])


@dataclass(frozen=True)
class RegressionTargets2D:
    dx: float
    dy: float
    dl: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dl, self.dh])


def encode_3d(anchor: Box3D, gt: Box3D) -> RegressionTargets3D:
    """Centre offsets over the anchor's BEV diagonal, log size ratios, wrapped yaw residual."""
    diag = math.hypot(anchor.l, anchor.w)
    return RegressionTargets3D(
        (gt.x - anchor.x) / diag, (gt.y - anchor.y) / diag, (gt.z - anchor.z) / diag,
        math.log(gt.l / anchor.l), math.log(gt.w / anchor.w), math.log(gt.h / anchor.h),
        wrap_angle(gt.theta - anchor.theta))


def decode_3d(anchor: Box3D, t: RegressionTargets3D) -> Box3D:
    diag = math.hypot(anchor.l, anchor.w)
    return Box3D(anchor.x + t.dx * diag, anchor.y + t.dy * diag, anchor.z + t.dz * diag,
                 anchor.l * math.exp(t.dl), anchor.w * math.exp(t.dw), anchor.h * math.exp(t.dh),
                 anchor.theta + t.dtheta)


def encode_2d(anchor: Box2D, gt: Box2D) -> RegressionTargets2D:
    return RegressionTargets2D((gt.x - anchor.x) / anchor.l, (gt.y - anchor.y) / anchor.h,
                               math.log(gt.l / anchor.l), math.log(gt.h / anchor.h))


def decode_2d(anchor: Box2D, t: RegressionTargets2D) -> Box2D:
    return Box2D(anchor.x + t.dx * anchor.l, anchor.y + t.dy * anchor.h,
                 anchor.l * math.exp(t.dl), anchor.h * math.exp(t.dh))


# --- proposal assignment ------------------------------------------------------------

class ProposalLabel(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORED = "ignored"


class Assignment(NamedTuple):
    label: ProposalLabel
    max_iou: float
    gt_index: int  # argmax GT, -1 without GTs
    regress: bool


def assign_proposals(proposals: Sequence[Box3D], gts: Sequence[Box3D], pos: float = 0.6,
                     neg: float = 0.45, reg_min: float = 0.55) -> list[Assignment]:
    if not proposals:
        return []
    if not gts:
        return [Assignment(ProposalLabel.NEGATIVE, 0.0, -1, False) for _ in proposals]
    ious = iou_matrix_3d(boxes3d_array(proposals), boxes3d_array(gts), "3d")
    out = []
    for row in ious:
        j = int(np.argmax(row))
        m = float(row[j])
        if m > pos:
            label = ProposalLabel.POSITIVE
        elif m < neg:
            label = ProposalLabel.NEGATIVE
        else:
            label = ProposalLabel.IGNORED
        out.append(Assignment(label, m, j, m >= reg_min))
    return out


def select_top_k(proposals: Sequence[Box3D] | np.ndarray, scores, k: int,
                 iou_threshold: float = 0.85) -> list[int]:
    """Indices of the ``k`` best NMS survivors, highest score first."""
    if k < 0:
        raise ValueError("k must be non-negative")
    keep = nms_rotated(proposals, scores, iou_threshold)
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.asarray(keep, dtype=int)
    keep = keep[score_order(scores[keep])] if keep.size else keep
    return [int(i) for i in keep[:k]]
