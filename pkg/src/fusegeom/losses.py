"""Segmentation and regression losses, including the 2D/3D reprojection coupling term."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .anchors import RegressionTargets2D, RegressionTargets3D
from .boxes import NEAR_PLANE, Box2D, Box3D, _CORNER_SIGNS, box3d_corners, project_box3d_to_box2d
from .calib import Calibration, velo_to_rect_xyz
from .errors import BothEmpty, EmptyInput, KindMismatch


@dataclass(frozen=True)
class LossConfig:
    alpha_bce: float = 1.0      # weight of the negative term in the 2D segmentation loss
    beta_focal: float = 0.25
    gamma_focal: float = 2.0
    alpha_reproj: float = 1.0   # weight of the reprojection term in the regression loss
    prob_epsilon: float = 1e-7

    def __post_init__(self):
        for name in ("alpha_bce", "beta_focal", "gamma_focal", "alpha_reproj"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.prob_epsilon < 0.5:
            raise ValueError("prob_epsilon must lie in (0, 0.5)")


def _probs(p, eps: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return np.clip(p, eps, 1 - eps)


def bce_seg_loss(pos_probs, neg_probs, cfg: LossConfig = LossConfig()) -> float:
    """Class-balanced binary cross entropy; an empty list drops its term."""
    pos = _probs(pos_probs, cfg.prob_epsilon)
    neg = _probs(neg_probs, cfg.prob_epsilon)
    if pos.size == 0 and neg.size == 0:
        raise BothEmpty("no positive and no negative probabilities")
    loss = 0.0
    if pos.size:
        loss -= np.log(pos).mean()
    if neg.size:
        loss -= cfg.alpha_bce * np.log1p(-neg).mean()
    return float(loss)


def focal_loss(P, cfg: LossConfig = LossConfig()) -> float:
    """Mean of -beta (1 - P)^gamma log P over foreground-point probabilities."""
    p = _probs(P, cfg.prob_epsilon)
    if p.size == 0:
        raise EmptyInput("focal_loss needs at least one probability")
    return float(np.mean(-cfg.beta_focal * (1 - p) ** cfg.gamma_focal * np.log(p)))


def huber(r) -> np.ndarray:
    a = np.abs(r)
    return np.where(a < 1.0, 0.5 * a * a, a - 0.5)


def huber_grad(r) -> np.ndarray:
    return np.where(np.abs(r) < 1.0, r, np.sign(r))


def smooth_l1(pred, target) -> float:
    """Summed elementwise smooth-L1 (transition at 1.0) between two target tuples."""
    if type(pred) is not type(target):
        raise KindMismatch(f"{type(pred).__name__} vs {type(target).__name__}")
    if isinstance(pred, (RegressionTargets2D, RegressionTargets3D)):
        p, t = pred.as_array(), target.as_array()
    else:
        p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
        if p.shape != t.shape:
            raise KindMismatch(f"shapes {p.shape} vs {t.shape}")
    return float(huber(p - t).sum())


def regression_loss(preds: Sequence, targets: Sequence) -> float:
    """Per-box smooth-L1 sums averaged over boxes."""
    if len(preds) != len(targets):
        raise KindMismatch(f"{len(preds)} predictions for {len(targets)} targets")
    if not preds:
        return 0.0
    return float(np.mean([smooth_l1(p, t) for p, t in zip(preds, targets)]))


def reprojection_residual(projected: Box2D, regressed2d: Box2D) -> np.ndarray:
    return np.array([
        (projected.x - regressed2d.x) / regressed2d.l,
        (projected.y - regressed2d.y) / regressed2d.h,
        math.log(projected.l / regressed2d.l),
        math.log(projected.h / regressed2d.h),
    ])


def reprojection_loss(calib: Calibration, regressed3d: Box3D, regressed2d: Box2D,
                      image_size: Optional[tuple[int, int]] = None) -> float:
    """Smooth-L1 between the regressed 2D box and the projection of the regressed 3D box.

    Centre differences are normalised by the regressed 2D size and sizes are
    compared as log ratios, so the value does not depend on image scale.
    """
    projected = project_box3d_to_box2d(calib, regressed3d, image_size)
    return float(huber(reprojection_residual(projected, regressed2d)).sum())


def reprojection_loss_grad(calib: Calibration, regressed3d: Box3D, regressed2d: Box2D) -> np.ndarray:
    """Analytic gradient of :func:`reprojection_loss` w.r.t. (x, y, z, l, w, h, theta).

    Valid where every corner is in front of the near plane (no clipping) and the
    extreme corners are unique; elsewhere the loss is not differentiable.
    """
    box = regressed3d
    rot_v2r = calib.velo_to_rect_rotation
    corners = velo_to_rect_xyz(calib, box3d_corners(box))
    if np.any(corners[:, 2] < NEAR_PLANE):
        raise ValueError("gradient is only defined for boxes fully in front of the camera")
    x, y, z = corners[:, 0], corners[:, 1], corners[:, 2]
    u = calib.f_u * (x - calib.b_x) / z + calib.c_u
    v = calib.f_v * y / z + calib.c_v
    du_dq = np.stack([calib.f_u / z, np.zeros_like(z), -calib.f_u * (x - calib.b_x) / z ** 2], -1)
    dv_dq = np.stack([np.zeros_like(z), calib.f_v / z, -calib.f_v * y / z ** 2], -1)

    c, s = math.cos(box.theta), math.sin(box.theta)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    drz = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    dims = np.array([box.l, box.w, box.h])
    # dq_k / dparam, shape (8, 3, 7)
    dq = np.zeros((8, 3, 7))
    dq[:, :, 0:3] = rot_v2r
    for j in range(3):
        e = np.zeros((8, 3))
        e[:, j] = _CORNER_SIGNS[:, j]
        dq[:, :, 3 + j] = (rot_v2r @ rz @ e.T).T
    dq[:, :, 6] = (rot_v2r @ drz @ (_CORNER_SIGNS * dims).T).T

    du = np.einsum("ki,kip->kp", du_dq, dq)
    dv = np.einsum("ki,kip->kp", dv_dq, dq)
    i1, i2, j1, j2 = np.argmin(u), np.argmax(u), np.argmin(v), np.argmax(v)
    x1, x2, y1, y2 = u[i1], u[i2], v[j1], v[j2]
    proj = Box2D.from_corners(x1, y1, x2, y2)
    r = reprojection_residual(proj, regressed2d)
    g = huber_grad(r)
    b = regressed2d
    dr = np.stack([
        0.5 * (du[i1] + du[i2]) / b.l,
        0.5 * (dv[j1] + dv[j2]) / b.h,
        (du[i2] - du[i1]) / (x2 - x1),
        (dv[j2] - dv[j1]) / (y2 - y1),
    ])
    return g @ dr


def total_regression_loss(l2d: float, l3d: float, lrep: float, cfg: LossConfig = LossConfig()) -> float:
    if min(l2d, l3d, lrep) < 0:
        raise ValueError("loss terms must be non-negative")
    return l2d + l3d + cfg.alpha_reproj * lrep
