from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence
from jsonpath_nz import log

from trifuse.config import FusionConfig
from trifuse.core import (ABNORMAL, ABNORMAL_MOTION, NORMAL, NORMAL_MOTION, UNKNOWN_ACTION, BBox, BranchScore,
                          BranchScores, Detection, Explanation, FusedScore, ScoredTarget, TargetRef, TrackSegment,
                          min_max_normalize)
from trifuse.util import DataError

BRANCHES = ("sco_obj", "sco_act", "sco_mot")


def fuse_raw(scores: BranchScores, cfg: FusionConfig) -> float:
    """
    Weighted maximum over the branch scores of one target

    With policy "ignore" absent branches are left out of the max, with "zero"
    they take part as 0.
    """
    values = []
    for weight, name in zip(cfg.weights, BRANCHES):
        score = getattr(scores, name)
        if score is not None:
            values.append(weight * score.normalized)
        elif cfg.missing_branch_policy == "zero":
            values.append(0.0)
    if all(getattr(scores, name) is None for name in BRANCHES):
        raise DataError(f"no branch scores for target {scores.target_id} in frame {scores.frame_index}")
    return max(values)


def _explanation(obj_label: Optional[str], act_label: Optional[str], motion_normalized: Optional[float],
                 flag_threshold: float) -> Explanation:
    motion_flag = ABNORMAL_MOTION if motion_normalized is not None and motion_normalized > flag_threshold \
        else NORMAL_MOTION
    return Explanation(obj_label if obj_label is not None else "unknown-object",
                       act_label if act_label is not None else UNKNOWN_ACTION,
                       motion_flag)


def explain(scores: BranchScores, detection: Optional[Detection], segment: Optional[TrackSegment],
            motion_normalized: Optional[float], flag_threshold: float) -> Explanation:
    '''(object label, action label or "unknown-action", "abnormal motion"/"normal motion")'''
    if detection is None:
        raise DataError(f"cannot explain target {scores.target_id} in frame {scores.frame_index} without a detection")
    return _explanation(detection.obj_label, segment.act_label if segment is not None else None,
                        motion_normalized, flag_threshold)


def fuse_batch(all_scores: Sequence[BranchScores], cfg: FusionConfig) -> List[FusedScore]:
    '''Weighted max per target, min-max normalization over the whole list, then the strict threshold decision'''
    if not all_scores:
        raise DataError("empty score list")
    raws = [fuse_raw(s, cfg) for s in all_scores]
    normalized = min_max_normalize(raws)
    fused = []
    for s, raw, norm in zip(all_scores, raws, normalized):
        motion = s.sco_mot.normalized if s.sco_mot is not None else None
        fused.append(FusedScore(
            target_id=s.target_id,
            frame_index=s.frame_index,
            raw=float(raw),
            normalized=float(norm),
            decision=ABNORMAL if norm > cfg.decision_threshold else NORMAL,
            explanation=_explanation(s.obj_label, s.act_label, motion, cfg.motion_flag_threshold),
        ))
    n_abnormal = sum(f.decision == ABNORMAL for f in fused)
    log.info(f"Fused {len(fused)} targets, {n_abnormal} abnormal at threshold {cfg.decision_threshold}")
    return fused


def assemble_branch_scores(detections: Sequence[Detection],
                           obj_scores: Sequence[ScoredTarget],
                           act_scores: Sequence[ScoredTarget],
                           mot_scores: Sequence[ScoredTarget],
                           segments: Sequence[TrackSegment] = ()) -> List[BranchScores]:
    """
    Join the three branches on (frame, target)

    Every detection yields one record; action scores attach through the last
    frame of their segment. Records come back sorted by frame then target id.
    """
    def by_ref(scored):
        return {s.ref: BranchScore(s.raw, s.normalized) for s in scored}

    obj, act, mot = by_ref(obj_scores), by_ref(act_scores), by_ref(mot_scores)
    act_labels = {seg.ref: seg.act_label for seg in segments}
    refs = {d.ref for d in detections}
    orphans = sum(1 for ref in act if ref not in refs)
    if orphans:
        log.warning(f"{orphans} action score(s) end on a frame without a detection of their target")

    records = []
    for d in sorted(detections, key=lambda d: (d.frame_index, d.target_id)):
        records.append(BranchScores(
            target_id=d.target_id,
            frame_index=d.frame_index,
            sco_obj=obj.get(d.ref),
            sco_act=act.get(d.ref),
            sco_mot=mot.get(d.ref),
            obj_label=d.obj_label,
            act_label=act_labels.get(d.ref),
        ))
    return records


def _score_to_json(score: Optional[BranchScore]) -> Optional[Dict[str, float]]:
    return None if score is None else {"raw": score.raw, "normalized": score.normalized}


def _score_from_json(value: Any) -> Optional[BranchScore]:
    if value is None:
        return None
    return BranchScore(float(value["raw"]), float(value["normalized"]))


@dataclass(frozen=True)
class ResultRecord:
    """One line of the results file: branch scores, fused score and the target box"""
    scores: BranchScores
    fused: FusedScore
    bbox: BBox

    @property
    def frame_index(self) -> int:
        return self.fused.frame_index

    @property
    def target_id(self) -> str:
        return self.fused.target_id

    @property
    def ref(self) -> TargetRef:
        return self.fused.ref

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "frame_index": self.frame_index,
            "target_id": self.target_id,
            "bbox": list(self.bbox),
            "obj_label": self.scores.obj_label,
            "act_label": self.scores.act_label,
            "sco_obj": _score_to_json(self.scores.sco_obj),
            "sco_act": _score_to_json(self.scores.sco_act),
            "sco_mot": _score_to_json(self.scores.sco_mot),
            "fused_raw": self.fused.raw,
            "fused": self.fused.normalized,
            "decision": self.fused.decision,
            "explanation": list(self.fused.explanation),
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "ResultRecord":
        frame_index = int(data["frame_index"])
        target_id = str(data["target_id"])
        scores = BranchScores(target_id, frame_index,
                              _score_from_json(data["sco_obj"]),
                              _score_from_json(data["sco_act"]),
                              _score_from_json(data["sco_mot"]),
                              data.get("obj_label"), data.get("act_label"))
        decision = data["decision"]
        if decision not in (NORMAL, ABNORMAL):
            raise DataError(f"unknown decision {decision!r}")
        explanation = data["explanation"]
        if len(explanation) != 3:
            raise DataError(f"explanation must have 3 entries, got {explanation}")
        fused = FusedScore(target_id, frame_index, float(data["fused_raw"]), float(data["fused"]), decision,
                           Explanation(*(str(e) for e in explanation)))
        return cls(scores, fused, tuple(int(v) for v in data["bbox"]))


def build_results(detections: Sequence[Detection], branch_scores: Sequence[BranchScores],
                  fused: Sequence[FusedScore]) -> List[ResultRecord]:
    boxes = {d.ref: d.bbox for d in detections}
    return [ResultRecord(s, f, boxes[s.ref]) for s, f in zip(branch_scores, fused)]
