import numpy as np
import pytest

from trifuse.config import FusionConfig
from trifuse.core import (ABNORMAL, NORMAL, BranchScore, BranchScores, Detection, Explanation, ScoredTarget,
                          TargetRef, TrackSegment)
from trifuse.fusion_process import (ResultRecord, assemble_branch_scores, build_results, explain, fuse_batch,
                                    fuse_raw)
from trifuse.util import DataError


def scores(obj=None, act=None, mot=None, target="t", frame=0):
    def wrap(v):
        return None if v is None else BranchScore(v, v)
    return BranchScores(target, frame, wrap(obj), wrap(act), wrap(mot), "person", None)


class TestFuseRaw:
    def test_plain_max(self):
        assert fuse_raw(scores(0.2, 0.9, 0.1), FusionConfig(weights=(1, 1, 1))) == 0.9

    def test_weighted_max(self):
        assert fuse_raw(scores(0.6, 0.4, 0.5), FusionConfig(weights=(1, 1.5, 1.5))) == pytest.approx(0.75)

    def test_missing_branches(self):
        assert fuse_raw(scores(obj=0.8), FusionConfig()) == 0.8
        assert fuse_raw(scores(obj=0.0), FusionConfig(weights=(0, 1, 1), missing_branch_policy="zero")) == 0.0
        with pytest.raises(DataError, match="no branch scores"):
            fuse_raw(scores(), FusionConfig())

    def test_dominates_every_weighted_branch(self):
        rng = np.random.default_rng(0)
        for _ in range(10000):
            values = [None if rng.random() < 0.2 else float(rng.random()) for _ in range(3)]
            if all(v is None for v in values):
                continue
            weights = tuple(float(w) for w in rng.uniform(0, 2, size=3))
            if not any(weights):
                continue
            fused = fuse_raw(scores(*values), FusionConfig(weights=weights))
            for w, v in zip(weights, values):
                if v is not None:
                    assert fused >= w * v


class TestFuseBatch:
    def test_normalization_and_decisions(self):
        batch = [scores(0.9, target="a"), scores(0.3, target="b"), scores(0.6, target="c")]
        fused = fuse_batch(batch, FusionConfig(decision_threshold=0.45))
        np.testing.assert_allclose([f.normalized for f in fused], [1.0, 0.0, 0.5], atol=1e-12)
        assert [f.decision for f in fused] == [ABNORMAL, NORMAL, ABNORMAL]

    def test_single_target_is_normal_at_half(self):
        fused = fuse_batch([scores(0.7)], FusionConfig(decision_threshold=0.5))
        assert fused[0].normalized == 0.5 and fused[0].decision == NORMAL

    def test_uniform_weight_scaling_keeps_decisions(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            batch = [scores(*(float(v) for v in rng.random(3)), target=f"t{i}") for i in range(20)]
            weights = rng.uniform(0.1, 2, size=3)
            factor = float(rng.uniform(0.1, 10))
            base = fuse_batch(batch, FusionConfig(weights=tuple(weights)))
            scaled = fuse_batch(batch, FusionConfig(weights=tuple(weights * factor)))
            np.testing.assert_allclose([f.normalized for f in base], [f.normalized for f in scaled], atol=1e-9)
            margin = [abs(f.normalized - 0.5) > 1e-9 for f in base]
            assert [f.decision for f, m in zip(base, margin) if m] == [f.decision for f, m in zip(scaled, margin) if m]

    def test_single_branch_matches_branch_decisions(self):
        values = [0.1, 0.8, 0.55, 0.3]
        fused = fuse_batch([scores(act=v, target=f"t{i}") for i, v in enumerate(values)],
                           FusionConfig(decision_threshold=0.5))
        normalized = (np.array(values) - 0.1) / 0.7
        assert [f.is_abnormal for f in fused] == list(normalized > 0.5)

    def test_empty(self):
        with pytest.raises(DataError):
            fuse_batch([], FusionConfig())


class TestExplain:
    box = (0, 0, 2, 2)

    def segment(self, action):
        return TrackSegment("t", tuple((f, self.box) for f in range(5)), action, 0.9)

    def test_caption_example(self):
        d = Detection(4, "t", self.box, "person", 0.9)
        assert explain(scores(), d, self.segment("riding"), 0.97, 0.5) == ("person", "riding", "abnormal motion")
        assert explain(scores(), d, self.segment("walking"), 0.1, 0.5) == ("person", "walking", "normal motion")

    def test_missing_segment(self):
        d = Detection(4, "t", self.box, "car", 0.9)
        assert explain(scores(), d, None, 0.9, 0.5) == Explanation("car", "unknown-action", "abnormal motion")

    def test_missing_motion_is_normal(self):
        d = Detection(4, "t", self.box, "car", 0.9)
        assert explain(scores(), d, None, None, 0.5).motion_flag == "normal motion"

    def test_needs_detection(self):
        with pytest.raises(DataError):
            explain(scores(), None, None, 0.9, 0.5)


class TestAssemble:
    def test_join_and_result_records(self):
        box = (0, 0, 2, 2)
        dets = [Detection(5, "b", box, "person", 0.9), Detection(4, "a", box, "car", 0.8),
                Detection(5, "a", box, "car", 0.8)]
        seg = TrackSegment("a", tuple((f, box) for f in range(1, 6)), "riding", 0.95)
        obj = [ScoredTarget(d.ref, 0.0, 0.5) for d in dets]
        act = [ScoredTarget(seg.ref, 0.95, 1.0)]
        mot = [ScoredTarget(TargetRef(5, "b"), -3.0, 0.2)]
        assembled = assemble_branch_scores(dets, obj, act, mot, [seg])
        assert [(s.frame_index, s.target_id) for s in assembled] == [(4, "a"), (5, "a"), (5, "b")]
        assert assembled[1].sco_act == BranchScore(0.95, 1.0) and assembled[1].act_label == "riding"
        assert assembled[0].sco_act is None and assembled[2].sco_mot == BranchScore(-3.0, 0.2)

        records = build_results(dets, assembled, fuse_batch(assembled, FusionConfig()))
        assert records[1].fused.explanation == ("car", "riding", "normal motion")
        for record in records:
            assert ResultRecord.from_json_dict(record.to_json_dict()) == record
