'''
Frame-level and pixel-level anomaly evaluation: ROC curves, AUC and EER.

A frame scores the maximum over its targets. At threshold t a frame is predicted
abnormal when its score is > t. At pixel level an abnormal frame only counts as
detected when the boxes of its targets scoring > t cover more than 40% of the
ground-truth pixels.
'''
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from jsonpath_nz import log
from sklearn import metrics

from trifuse.core import BBox
from trifuse.util import DataError, NumericError

PIXEL_HIT_PERCENT = 40
FRAME = "frame"
PIXEL = "pixel"


@dataclass(frozen=True)
class FrameScore:
    frame_index: int
    score: float
    gt_abnormal: bool
    # highest threshold that still satisfies the pixel criterion; None when never met
    pixel_score: Optional[float] = None


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self) -> List[Tuple[float, float]]:
        return [(float(f), float(t)) for f, t in zip(self.fpr, self.tpr)]

    def threshold_table(self) -> List[Dict[str, Optional[float]]]:
        def finite(v):
            return float(v) if np.isfinite(v) else None
        return [{"threshold": finite(th), "fpr": float(f), "tpr": float(t)}
                for th, f, t in zip(self.thresholds, self.fpr, self.tpr)]


def box_mask(boxes: Iterable[BBox], shape: Tuple[int, int]) -> np.ndarray:
    '''Union of boxes as a boolean (height, width) mask, clipped to the frame'''
    mask = np.zeros(shape, dtype=bool)
    height, width = shape
    for x, y, w, h in boxes:
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, width), min(y + h, height)
        if x1 > x0 and y1 > y0:
            mask[y0:y1, x0:x1] = True
    return mask


def pixel_level_hit(pred_regions: Iterable[BBox], gt_mask: np.ndarray) -> bool:
    '''True iff the predicted boxes cover strictly more than 40% of the abnormal ground-truth pixels'''
    gt = np.asarray(gt_mask) > 0
    total = int(np.count_nonzero(gt))
    if total == 0:
        raise DataError("pixel criterion undefined on normal frame")
    covered = int(np.count_nonzero(box_mask(pred_regions, gt.shape) & gt))
    return covered * 100 > PIXEL_HIT_PERCENT * total


def fused_score_of(record) -> Optional[float]:
    fused = getattr(record, "fused", record)
    return fused.normalized


def branch_score_of(branch: str) -> Callable[[Any], Optional[float]]:
    '''Score accessor for one branch ("sco_obj", "sco_act" or "sco_mot") of a result record'''
    def score_of(record):
        score = getattr(record.scores, branch)
        return None if score is None else score.normalized
    return score_of


def _pixel_score(targets: List[Tuple[float, BBox]], gt_mask: np.ndarray) -> Optional[float]:
    '''Walk thresholds downwards, adding boxes group by group, until the 40% rule holds'''
    ordered = sorted(targets, key=lambda t: -t[0])
    regions: List[BBox] = []
    i = 0
    while i < len(ordered):
        level = ordered[i][0]
        while i < len(ordered) and ordered[i][0] == level:
            regions.append(ordered[i][1])
            i += 1
        if pixel_level_hit(regions, gt_mask):
            return level
    return None


def frame_scores(results: Sequence, ground_truth_masks: Mapping[int, np.ndarray],
                 score_of: Callable[[Any], Optional[float]] = fused_score_of,
                 frame_indices: Optional[Iterable[int]] = None) -> List[FrameScore]:
    """
    Collapse per-target scores into per-frame scores

    Args:
        results: records with frame_index (and bbox for the pixel criterion)
        ground_truth_masks: frame index -> mask, non-zero pixels are abnormal
        score_of: per-record score, None when the record has no score for this curve
        frame_indices: frames to evaluate (default: every masked frame)

    Returns:
        FrameScore per frame, sorted by frame index
    """
    by_frame: Dict[int, List[Tuple[float, Optional[BBox]]]] = defaultdict(list)
    for record in results:
        if record.frame_index not in ground_truth_masks:
            raise DataError(f"no ground-truth mask for frame {record.frame_index}")
        score = score_of(record)
        if score is not None:
            by_frame[record.frame_index].append((float(score), getattr(record, "bbox", None)))

    frames = sorted(ground_truth_masks) if frame_indices is None else sorted(frame_indices)
    scores = []
    for f in frames:
        if f not in ground_truth_masks:
            raise DataError(f"no ground-truth mask for frame {f}")
        mask = ground_truth_masks[f]
        targets = by_frame.get(f, [])
        gt_abnormal = bool(np.any(np.asarray(mask) > 0))
        pixel_score = None
        if gt_abnormal:
            boxed = [(s, b) for s, b in targets if b is not None]
            pixel_score = _pixel_score(boxed, mask) if boxed else None
        scores.append(FrameScore(f, max((s for s, _ in targets), default=0.0), gt_abnormal, pixel_score))
    return scores


def _level_scores(scores: Sequence[FrameScore], level: str) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.array([s.gt_abnormal for s in scores], dtype=bool)
    if level == FRAME:
        values = np.array([s.score for s in scores], dtype=np.float64)
    elif level == PIXEL:
        values = np.array([(s.pixel_score if s.pixel_score is not None else -np.inf) if s.gt_abnormal else s.score
                           for s in scores], dtype=np.float64)
    else:
        raise DataError(f"unknown evaluation level {level!r}")
    return values, labels


def _check_classes(labels: np.ndarray):
    positives = int(labels.sum())
    if positives == 0 or positives == labels.size:
        raise NumericError("degenerate ROC: ground truth has a single class")


def rates_at(scores: Sequence[FrameScore], thresholds: Sequence[float], level: str = FRAME) -> Tuple[np.ndarray, np.ndarray]:
    '''(FPR, TPR) at each threshold with the "score > t" rule'''
    values, labels = _level_scores(scores, level)
    _check_classes(labels)
    t = np.asarray(thresholds, dtype=np.float64)
    predicted = values[:, None] > t[None, :]
    tpr = predicted[labels].mean(axis=0)
    fpr = predicted[~labels].mean(axis=0)
    return fpr, tpr


def roc(scores: Sequence[FrameScore], level: str = FRAME) -> RocCurve:
    """
    ROC over every distinct score, from (0,0) to (1,1)

    Thresholds are reported with the "score > t" rule, so each point carries the
    next lower distinct score and the last one carries -inf. At pixel level the
    abnormal frames that never satisfy the 40% rule sit below every real score,
    and only the final (1,1) point counts them.
    """
    values, labels = _level_scores(scores, level)
    _check_classes(labels)
    missed = ~np.isfinite(values)
    sentinel = float(values[~missed].min()) - 1.0 if (~missed).any() else -1.0
    values = np.where(missed, sentinel, values)
    fpr, tpr, cuts = metrics.roc_curve(labels.astype(int), values, drop_intermediate=False)
    thresholds = np.concatenate(([np.inf], cuts[2:], [-np.inf]))
    if missed.any():
        thresholds[thresholds == sentinel] = -np.inf
    return RocCurve(fpr, tpr, thresholds)


def auc(curve: RocCurve) -> float:
    '''Trapezoidal area under the (FPR, TPR) polyline'''
    return float(metrics.auc(curve.fpr, curve.tpr))


def eer(curve: RocCurve) -> float:
    '''FPR where FPR = 1 - TPR, interpolated on the first segment that crosses it'''
    gap = curve.fpr + curve.tpr - 1.0
    crossing = np.flatnonzero(gap >= 0)
    if crossing.size == 0:
        return 1.0
    i = int(crossing[0])
    if i == 0:
        return float(curve.fpr[0])
    g0, g1 = gap[i - 1], gap[i]
    lam = -g0 / (g1 - g0)
    return float(curve.fpr[i - 1] + lam * (curve.fpr[i] - curve.fpr[i - 1]))


CURVES = {
    "fused": fused_score_of,
    "object": branch_score_of("sco_obj"),
    "action": branch_score_of("sco_act"),
    "motion": branch_score_of("sco_mot"),
}


def evaluate_results(results: Sequence, ground_truth_masks: Mapping[int, np.ndarray],
                     decision_threshold: float = 0.5) -> Tuple[Dict[str, Any], Dict[str, RocCurve]]:
    """
    Frame- and pixel-level AUC/EER for the fused score and each branch alone

    The fused entries also carry the threshold table and the (FPR, TPR) operating
    point at decision_threshold.

    Returns:
        (summary dict, curves keyed "<level>/<curve>")
    """
    summary: Dict[str, Any] = {FRAME: {}, PIXEL: {}}
    curves: Dict[str, RocCurve] = {}
    for name, score_of in CURVES.items():
        per_frame = frame_scores(results, ground_truth_masks, score_of)
        for level in (FRAME, PIXEL):
            curve = roc(per_frame, level)
            curves[f"{level}/{name}"] = curve
            entry = {"auc": auc(curve), "eer": eer(curve)}
            if name == "fused":
                entry["thresholds"] = curve.threshold_table()
                fpr, tpr = rates_at(per_frame, [decision_threshold], level)
                entry["operating_point"] = {"threshold": decision_threshold, "fpr": float(fpr[0]), "tpr": float(tpr[0])}
                entry["frames"] = len(per_frame)
                entry["abnormal_frames"] = sum(s.gt_abnormal for s in per_frame)
            summary[level][name] = entry
    log.info(f"frame-level fused AUC={summary[FRAME]['fused']['auc']:.4f} EER={summary[FRAME]['fused']['eer']:.4f}; "
             f"pixel-level fused AUC={summary[PIXEL]['fused']['auc']:.4f} EER={summary[PIXEL]['fused']['eer']:.4f}")
    return summary, curves
