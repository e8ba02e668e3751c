from typing import Iterable, List, Sequence
from jsonpath_nz import log

from trifuse.core import ScoredTarget, TrackSegment, Whitelist, build_whitelist, score_batch, signed_confidence


class ActionList(Whitelist):
    '''Action categories recognised in training with confidence above beta'''


def build_action_list(training_segments: Iterable[TrackSegment], beta: float) -> ActionList:
    """
    Build the action whitelist from training track segments

    Args:
        training_segments: K-frame segments of training targets with their recognised action
        beta: confidence threshold (strict)

    Returns:
        ActionList
    """
    action_list = build_whitelist(ActionList, ((s.act_label, s.act_conf) for s in training_segments),
                                  beta, "beta")
    log.info(f"action_list built with beta={beta}: {sorted(action_list.labels)}")
    return action_list


def score_action_raw(seg: TrackSegment, action_list: ActionList) -> float:
    return signed_confidence(seg.act_label, seg.act_conf, action_list)


def score_action_batch(test_segments: Sequence[TrackSegment], action_list: ActionList) -> List[ScoredTarget]:
    '''One score per segment, attributed to (last frame, target)'''
    return score_batch(test_segments, lambda s: score_action_raw(s, action_list), lambda s: s.ref)
