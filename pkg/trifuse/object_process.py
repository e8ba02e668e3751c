from typing import Iterable, List, Sequence
from jsonpath_nz import log

from trifuse.core import Detection, ScoredTarget, Whitelist, build_whitelist, score_batch, signed_confidence


class LabelList(Whitelist):
    '''Object labels detected in training with confidence above alpha'''


def build_label_list(training_detections: Iterable[Detection], alpha: float) -> LabelList:
    """
    Build the object label whitelist from training detections

    Args:
        training_detections: detections of the (normal) training set
        alpha: confidence threshold; a label is kept when some detection has obj_conf > alpha

    Returns:
        LabelList (empty when no detection passes, which is legal)
    """
    label_list = build_whitelist(LabelList, ((d.obj_label, d.obj_conf) for d in training_detections),
                                 alpha, "alpha")
    log.info(f"label_list built with alpha={alpha}: {sorted(label_list.labels)}")
    return label_list


def score_object_raw(d: Detection, label_list: LabelList) -> float:
    '''-obj_conf for a known label, +obj_conf otherwise'''
    return signed_confidence(d.obj_label, d.obj_conf, label_list)


def score_object_batch(test_detections: Sequence[Detection], label_list: LabelList) -> List[ScoredTarget]:
    '''Raw object scores of every test detection, normalized over the full test set'''
    return score_batch(test_detections, lambda d: score_object_raw(d, label_list), lambda d: d.ref)
