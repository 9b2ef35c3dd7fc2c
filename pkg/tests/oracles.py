"""Independent reference implementations used only by the tests."""
import math

import numpy as np

from fusegeom.boxes import Box3D, iou_bev


def inside_box_bev(box: Box3D, xy: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = xy[:, 0] - box.x, xy[:, 1] - box.y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= box.l / 2) & (np.abs(ly) <= box.w / 2)


def monte_carlo_iou_bev(a: Box3D, b: Box3D, n: int, rng) -> float:
    """Sample uniformly inside a's footprint and count hits in b.

    Samples go straight from a's local frame to b's with one composed rigid map.
    """
    local = (rng.random((n, 2)) - 0.5) * [a.l, a.w]
    phi = a.theta - b.theta
    c, s = math.cos(phi), math.sin(phi)
    cb, sb = math.cos(b.theta), math.sin(b.theta)
    dx, dy = a.x - b.x, a.y - b.y
    ox, oy = cb * dx + sb * dy, -sb * dx + cb * dy
    lx = c * local[:, 0] - s * local[:, 1] + ox
    ly = s * local[:, 0] + c * local[:, 1] + oy
    hits = np.count_nonzero((np.abs(lx) <= b.l / 2) & (np.abs(ly) <= b.w / 2))
    inter = a.l * a.w * hits / n
    return inter / (a.l * a.w + b.l * b.w - inter)


def brute_nms(boxes, scores, thr: float) -> list[int]:
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou_bev(boxes[i], boxes[j]) <= thr for j in kept):
            kept.append(i)
    return kept


def project_corner_envelope(calib, box: Box3D):
    """Project each corner one at a time with the full 3x4 matrix."""
    k = np.array([[calib.f_u, 0, calib.c_u, -calib.f_u * calib.b_x],
                  [0, calib.f_v, calib.c_v, 0], [0, 0, 1, 0]])
    r = calib.rect_rotation
    t = calib.velo_to_cam_rotation
    us, vs = [], []
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                local = np.array([sx * box.l / 2, sy * box.w / 2, sz * box.h / 2])
                c, s = math.cos(box.theta), math.sin(box.theta)
                p = np.array([c * local[0] - s * local[1], s * local[0] + c * local[1], local[2]]) + box.center
                cam = r @ (t @ p + calib.velo_to_cam_translation)
                y = k @ np.append(cam, 1.0)
                us.append(y[0] / y[2])
                vs.append(y[1] / y[2])
    return min(us), min(vs), max(us), max(vs)


def box_surface_distance(box: Box3D, xyz: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the boundary of ``box``."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    d = xyz - box.center
    local = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], -1)
    excess = np.abs(local) - np.array([box.l, box.w, box.h]) / 2
    outside = np.linalg.norm(np.maximum(excess, 0.0), axis=1)
    inside = -excess.max(axis=1)
    return np.where(excess.max(axis=1) > 0, outside, inside)


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _corner_uv(calib, box: Box3D):
    from fusegeom.boxes import box3d_corners
    from fusegeom.calib import project_velo_xyz
    p = project_velo_xyz(calib, box3d_corners(box))
    return p.u, p.v, p.depth


def _second_gap(values: np.ndarray) -> float:
    # corners stacked vertically share u exactly and move together, so only distinct values compete
    s = np.unique(np.round(values, 9))
    return min(s[1] - s[0], s[-1] - s[-2])


def reprojection_gradient_configs(rng, n: int, calib, knee_margin: float = 0.02, tie_margin: float = 0.05):
    """Random (box3d, box2d) pairs away from Huber knees, clipping and extreme-corner ties."""
    from fusegeom.boxes import Box2D, project_box3d_to_box2d
    from fusegeom.losses import reprojection_residual
    out = []
    while len(out) < n:
        box = Box3D(rng.uniform(8, 40), rng.uniform(-8, 8), rng.uniform(-1.5, 0), rng.uniform(3, 5),
                    rng.uniform(1.4, 2), rng.uniform(1.3, 1.8), rng.uniform(-np.pi, np.pi))
        u, v, depth = _corner_uv(calib, box)
        if depth.min() < 1.0 or _second_gap(u) < tie_margin or _second_gap(v) < tie_margin:
            continue
        proj = project_box3d_to_box2d(calib, box)
        b2 = Box2D(proj.x + rng.uniform(-0.6, 0.6) * proj.l, proj.y + rng.uniform(-0.6, 0.6) * proj.h,
                   proj.l * np.exp(rng.uniform(-1.5, 1.5)), proj.h * np.exp(rng.uniform(-1.5, 1.5)))
        r = reprojection_residual(proj, b2)
        if np.any(np.abs(np.abs(r) - 1.0) < knee_margin):
            continue
        out.append((box, b2))
    return out


def gradient_relative_error(calib, box: Box3D, b2) -> float:
    from fusegeom.losses import reprojection_loss, reprojection_loss_grad
    analytic = reprojection_loss_grad(calib, box, b2)
    numeric = central_difference(lambda p: reprojection_loss(calib, Box3D.from_array(p), b2), box.as_array())
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))


def _iou_any(a, b, mode: str) -> float:
    from fusegeom.boxes import iou_2d, iou_3d
    return {"2d": iou_2d, "bev": iou_bev, "3d": iou_3d}[mode](a, b)


def _gt_counts(gt, difficulty) -> bool:
    from fusegeom.evaluation import Difficulty
    if gt.difficulty == Difficulty.IGNORED:
        return False
    return difficulty is None or int(gt.difficulty) <= int(difficulty)


def brute_outcomes(dets, gts, thr, mode, difficulty):
    """Replay greedy matching frame by frame using scalar IoU calls."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    claimed = set()
    outcome = {}
    for i in order:
        best, best_iou, best_kind = None, -1.0, None
        for kind in (1, -1):
            for j, g in enumerate(gts):
                if g.frame_id != dets[i].frame_id or j in claimed:
                    continue
                if (kind == 1) != _gt_counts(g, difficulty):
                    continue
                v = _iou_any(dets[i].box, g.box, mode)
                if v >= thr and v > best_iou:
                    best, best_iou, best_kind = j, v, kind
            if best is not None:
                break
        if best is None:
            outcome[i] = 0
        else:
            claimed.add(best)
            outcome[i] = best_kind
    return order, outcome


def brute_ap(dets, gts, thr, mode, points, difficulty=None) -> float:
    num_gt = sum(_gt_counts(g, difficulty) for g in gts)
    if num_gt == 0:
        return 0.0
    order, outcome = brute_outcomes(dets, gts, thr, mode, difficulty)
    curve = []
    tp = fp = 0
    for i in order:
        if outcome[i] == -1:
            continue
        if outcome[i] == 1:
            tp += 1
        else:
            fp += 1
        curve.append((tp / num_gt, tp / (tp + fp)))
    levels = [i / 10 for i in range(11)] if points == 11 else [i / 40 for i in range(1, 41)]
    total = 0.0
    for r in levels:
        total += max([p for rec, p in curve if rec >= r], default=0.0)
    return total / len(levels)


def brute_recall(proposals, gts, thr, k, mode, difficulty=None) -> float:
    counted = [g for g in gts if _gt_counts(g, difficulty)]
    if not counted:
        return 0.0
    matched = 0
    for frame in {p.frame_id for p in proposals}:
        props = sorted([(i, p) for i, p in enumerate(proposals) if p.frame_id == frame],
                       key=lambda t: (-t[1].score, t[0]))[:k]
        frame_gts = [g for g in counted if g.frame_id == frame]
        taken = [False] * len(frame_gts)
        for _, p in props:
            best, best_iou = None, -1.0
            for j, g in enumerate(frame_gts):
                v = _iou_any(p.box, g.box, mode)
                if not taken[j] and v >= thr and v > best_iou:
                    best, best_iou = j, v
            if best is not None:
                taken[best] = True
                matched += 1
    return matched / len(counted)


def micro_scene(rng, mode: str, max_frames: int = 4):
    """A few frames with <= 5 GTs each; detections jitter GTs so IoUs straddle thresholds."""
    from fusegeom.boxes import Box2D
    from fusegeom.evaluation import Detection, Difficulty, GroundTruth
    dets, gts = [], []
    for f in range(int(rng.integers(1, max_frames + 1))):
        for _ in range(int(rng.integers(0, 6))):
            if mode == "2d":
                box = Box2D(*rng.uniform(0, 200, 2), *rng.uniform(10, 60, 2))
            else:
                box = Box3D(*rng.uniform(-10, 10, 2), rng.uniform(-1, 0), rng.uniform(3, 5), rng.uniform(1.4, 2),
                            rng.uniform(1.3, 1.8), rng.uniform(-np.pi, np.pi))
            gts.append(GroundTruth(box, Difficulty(int(rng.integers(0, 4))), f))
        frame_gts = [g for g in gts if g.frame_id == f]
        for _ in range(int(rng.integers(0, 7))):
            if frame_gts and rng.random() < 0.75:
                g = frame_gts[int(rng.integers(len(frame_gts)))].box
                a = g.as_array().copy()
                if mode == "2d":
                    a[:2] += rng.normal(0, 0.08, 2) * a[2:]
                    a[2:] *= np.exp(rng.normal(0, 0.08, 2))
                    box = Box2D(*a)
                else:
                    a[:3] += rng.normal(0, 0.25, 3)
                    a[3:6] *= np.exp(rng.normal(0, 0.06, 3))
                    a[6] += rng.normal(0, 0.08)
                    box = Box3D(*a)
            elif mode == "2d":
                box = Box2D(*rng.uniform(0, 200, 2), *rng.uniform(10, 60, 2))
            else:
                box = Box3D(*rng.uniform(-10, 10, 2), -0.5, 4, 1.7, 1.5, rng.uniform(-np.pi, np.pi))
            dets.append(Detection(box, float(np.round(rng.random(), 1)), f))
    return dets, gts
