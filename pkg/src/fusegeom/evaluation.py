"""Detection evaluation: interpolated AP, proposal recall at k, and zero-overlap miss counts."""
from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence, Union

import numpy as np

from .boxes import Box2D, Box3D, boxes2d_array, boxes3d_array, iou_2d_matrix, iou_matrix_3d, score_order


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


# (min box height px, max occlusion level, max truncation) per difficulty
DIFFICULTY_RULES = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


def difficulty_of(height: float, occlusion: int, truncation: float) -> Difficulty:
    for level, (min_h, max_occ, max_trunc) in DIFFICULTY_RULES.items():
        if height >= min_h and occlusion <= max_occ and truncation <= max_trunc:
            return level
    return Difficulty.IGNORED


Box = Union[Box2D, Box3D]


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    frame_id: Hashable = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    difficulty: Difficulty = Difficulty.EASY
    frame_id: Hashable = ""


MODES = ("2d", "bev", "3d")


def pairwise_iou(dets: Sequence[Box], gts: Sequence[Box], mode: str) -> np.ndarray:
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    if mode == "2d":
        return iou_2d_matrix(boxes2d_array(dets), boxes2d_array(gts))
    return iou_matrix_3d(boxes3d_array(dets), boxes3d_array(gts), mode)


def _counts_at(gt: GroundTruth, difficulty: Optional[Difficulty]) -> bool:
    if gt.difficulty == Difficulty.IGNORED:
        return False
    return difficulty is None or gt.difficulty <= difficulty


def _group(items, key=lambda x: x.frame_id) -> dict:
    groups = defaultdict(list)
    for i, item in enumerate(items):
        groups[key(item)].append(i)
    return groups


@dataclass
class APResult:
    ap: float
    recall: np.ndarray
    precision: np.ndarray
    num_gt: int
    num_tp: int
    num_fp: int
    defined: bool = True
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __float__(self) -> float:
        return self.ap


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float,
                     mode: str, difficulty: Optional[Difficulty] = None) -> np.ndarray:
    """Per-detection outcome: 1 true positive, 0 false positive, -1 ignored.

    Within each frame detections are visited by descending score; each claims the
    best-overlapping unclaimed counted GT at ``iou_threshold`` or above, else an
    unclaimed non-counted GT (the detection is then ignored), else it is a false
    positive.
    """
    outcome = np.zeros(len(dets), dtype=np.int64)
    gt_groups = _group(gts)
    for frame, det_idx in _group(dets).items():
        gt_idx = gt_groups.get(frame, [])
        scores = np.array([dets[i].score for i in det_idx])
        order = [det_idx[j] for j in score_order(scores)]
        if not gt_idx:
            continue
        iou = pairwise_iou([dets[i].box for i in order], [gts[j].box for j in gt_idx], mode)
        counts = np.array([_counts_at(gts[j], difficulty) for j in gt_idx])
        claimed = np.zeros(len(gt_idx), dtype=bool)
        for row, di in enumerate(order):
            ok = (iou[row] >= iou_threshold) & ~claimed
            for pool, result in ((ok & counts, 1), (ok & ~counts, -1)):
                if pool.any():
                    cand = np.flatnonzero(pool)
                    best = cand[np.argmax(iou[row, cand])]
                    claimed[best] = True
                    outcome[di] = result
                    break
    return outcome


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, points: int = 40) -> float:
    """Mean of the max precision at recall >= r over the interpolation levels.

    11 points use r = 0, 0.1, ..., 1; 40 points use r = 1/40, ..., 1.
    """
    if points == 11:
        levels = np.arange(11) / 10.0
    elif points == 40:
        levels = np.arange(1, 41) / 40.0
    else:
        raise ValueError("interpolation must be 11 or 40 points")
    if recall.size == 0:
        return 0.0
    # running max of precision from the right gives max precision at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, levels, side="left")
    vals = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


def evaluate_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.7,
                mode: str = "3d", interpolation: int = 40,
                difficulty: Optional[Difficulty] = None) -> APResult:
    """Average precision with greedy score-ordered matching.

    ``difficulty`` selects which GTs count (that level and easier); GTs marked
    IGNORED never count. Without any counted GT the AP is reported as 0 with
    ``defined=False``.
    """
    num_gt = sum(_counts_at(g, difficulty) for g in gts)
    outcome = match_detections(dets, gts, iou_threshold, mode, difficulty)
    keep = np.flatnonzero(outcome >= 0)
    scores = np.array([dets[i].score for i in keep], dtype=np.float64)
    order = keep[score_order(scores)] if keep.size else keep
    tp = (outcome[order] == 1).astype(np.float64)
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, tp.size + 1)
    precision = cum_tp / ranks if tp.size else np.zeros(0)
    recall = cum_tp / num_gt if num_gt else np.zeros(tp.size)
    thresholds = np.array([dets[i].score for i in order], dtype=np.float64)
    n_tp = int(tp.sum())
    if num_gt == 0:
        return APResult(0.0, recall, precision, 0, n_tp, int(tp.size - n_tp), False, thresholds)
    ap = interpolated_ap(recall, precision, interpolation)
    return APResult(ap, recall, precision, num_gt, n_tp, int(tp.size - n_tp), True, thresholds)


def compute_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.7,
               mode: str = "3d", interpolation: int = 40, difficulty: Optional[Difficulty] = None) -> float:
    return evaluate_ap(dets, gts, iou_threshold, mode, interpolation, difficulty).ap


def recall_at_k(proposals: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.7,
                k_values: Sequence[int] = (50, 100, 150, 200, 250, 300), mode: str = "3d",
                difficulty: Optional[Difficulty] = None) -> list[float]:
    """Fraction of counted GTs matched by each frame's top-k proposals, for every k."""
    num_gt = sum(_counts_at(g, difficulty) for g in gts)
    gt_groups = _group(gts)
    prepared = []
    for frame, idx in _group(proposals).items():
        g_idx = [j for j in gt_groups.get(frame, []) if _counts_at(gts[j], difficulty)]
        scores = np.array([proposals[i].score for i in idx])
        order = [idx[j] for j in score_order(scores)]
        iou = pairwise_iou([proposals[i].box for i in order], [gts[j].box for j in g_idx], mode)
        prepared.append(iou)
    out = []
    for k in k_values:
        if k < 0:
            raise ValueError("k must be non-negative")
        matched = 0
        for iou in prepared:
            if iou.shape[1] == 0:
                continue
            claimed = np.zeros(iou.shape[1], dtype=bool)
            for row in iou[:k]:
                ok = (row >= iou_threshold) & ~claimed
                if ok.any():
                    cand = np.flatnonzero(ok)
                    claimed[cand[np.argmax(row[cand])]] = True
            matched += int(claimed.sum())
        out.append(matched / num_gt if num_gt else 0.0)
    return out


MISPREDICTION_MIN_HEIGHT = {
    "easy": DIFFICULTY_RULES[Difficulty.EASY][0],
    "moderate": DIFFICULTY_RULES[Difficulty.MODERATE][0],
    "hard": DIFFICULTY_RULES[Difficulty.HARD][0],
}


def mispredicted_mask(dets: Sequence[Detection], gts: Sequence[GroundTruth]) -> np.ndarray:
    """True for 2D detections that overlap no GT box of their frame at all."""
    mask = np.ones(len(dets), dtype=bool)
    gt_groups = _group(gts)
    for frame, idx in _group(dets).items():
        g_idx = gt_groups.get(frame, [])
        if not g_idx:
            continue
        iou = pairwise_iou([dets[i].box for i in idx], [gts[j].box for j in g_idx], "2d")
        mask[idx] = iou.max(axis=1) == 0.0
    return mask


def count_mispredicted(dets: Sequence[Detection], gts: Sequence[GroundTruth]) -> dict[str, int]:
    """Zero-overlap detections, bucketed by the height gate of each difficulty level.

    Every GT of the frame (ignored ones included) counts as an overlap target.
    """
    mask = mispredicted_mask(dets, gts)
    heights = np.array([d.box.h for d in dets])
    counts = {name: int(np.sum(mask & (heights >= h))) if len(dets) else 0
              for name, h in MISPREDICTION_MIN_HEIGHT.items()}
    counts["all"] = int(mask.sum())
    return counts
