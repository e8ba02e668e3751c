'''
Synthetic surveillance scene: boxes moving over a static background, with the
outputs a detector, a tracker plus action recognizer and an optical-flow
estimator would produce.

Normal targets walk at normal speeds with whitelisted labels and actions.
Each abnormal target shows exactly one anomaly kind during its own time window:
    novel-object  an object label never seen in training
    novel-action  an action never seen in training
    fast-motion   a normal target moving faster than the HMOF magnitude cap
'''
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from jsonpath_nz import log

from trifuse.config import SyntheticSceneConfig
from trifuse.core import Detection, FlowField, TrackSegment, rng_stream
from trifuse.ingest_process import Dataset, Split


@dataclass
class _Target:
    target_id: str
    label: str
    action: str
    speed: float
    angle: float
    x: float
    y: float
    start: int
    stop: int
    kind: Optional[str] = None

    def active(self, frame: int) -> bool:
        return self.start <= frame < self.stop


def abnormal_windows(test_frames: int, n_abnormal: int) -> List[Tuple[int, int]]:
    '''Disjoint [start, stop) windows, one per abnormal target, centred in equal slots'''
    if n_abnormal == 0:
        return []
    slot = test_frames // n_abnormal
    length = max(1, slot * 4 // 5)
    windows = []
    for i in range(n_abnormal):
        start = i * slot + (slot - length) // 2
        windows.append((start, min(start + length, test_frames)))
    return windows


def _spawn(rng: np.random.Generator, cfg: SyntheticSceneConfig, target_id: str, label: str, action: str,
           speed_range: Tuple[float, float], start: int, stop: int, kind: Optional[str] = None) -> _Target:
    bw, bh = cfg.box_size
    return _Target(target_id, label, action,
                   speed=float(rng.uniform(*speed_range)),
                   angle=float(rng.uniform(0.0, 2.0 * math.pi)),
                   x=float(rng.uniform(0, cfg.frame_width - bw)),
                   y=float(rng.uniform(0, cfg.frame_height - bh)),
                   start=start, stop=stop, kind=kind)


def _step(t: _Target, vx: float, vy: float, max_x: int, max_y: int):
    '''Advance one frame, bouncing off the frame border'''
    t.x += vx
    t.y += vy
    if t.x < 0 or t.x > max_x:
        t.x = -t.x if t.x < 0 else 2 * max_x - t.x
        t.angle = math.pi - t.angle
    if t.y < 0 or t.y > max_y:
        t.y = -t.y if t.y < 0 else 2 * max_y - t.y
        t.angle = -t.angle
    t.x = min(max(t.x, 0.0), float(max_x))
    t.y = min(max(t.y, 0.0), float(max_y))


def _high_confidence(rng: np.random.Generator, noise: float) -> float:
    return float(np.clip(1.0 - abs(rng.normal(0.0, 1.0)) * noise, 0.0, 1.0))


def _simulate(targets: List[_Target], frame_count: int, cfg: SyntheticSceneConfig, K: int,
              rng: np.random.Generator, training: bool) -> Split:
    W, H = cfg.frame_width, cfg.frame_height
    bw, bh = cfg.box_size
    max_x, max_y = W - bw, H - bh
    detections, segments = [], []
    flows: Dict[int, FlowField] = {}
    masks: Dict[int, np.ndarray] = {}
    history: Dict[str, List[Tuple[int, Tuple[int, int, int, int]]]] = {t.target_id: [] for t in targets}

    for frame in range(frame_count):
        vectors = rng.normal(0.0, cfg.flow_noise, size=(H, W, 2))
        mask = np.zeros((H, W), dtype=np.uint8)
        for t in targets:
            if not t.active(frame):
                continue
            speed = t.speed * max(0.1, 1.0 + cfg.speed_jitter * rng.normal())
            vx, vy = speed * math.cos(t.angle), speed * math.sin(t.angle)
            x, y = int(round(t.x)), int(round(t.y))
            bbox = (x, y, bw, bh)
            vectors[y:y + bh, x:x + bw, 0] += vx
            vectors[y:y + bh, x:x + bw, 1] += vy
            if t.kind is not None:
                mask[y:y + bh, x:x + bw] = 255

            if training and rng.random() < cfg.spurious_rate:
                label, conf = cfg.spurious_label, float(rng.uniform(0.3, 0.6))
            else:
                label, conf = t.label, _high_confidence(rng, cfg.conf_noise)
            detections.append(Detection(frame, t.target_id, bbox, label, conf))

            track = history[t.target_id]
            track.append((frame, bbox))
            if len(track) >= K:
                segments.append(TrackSegment(t.target_id, tuple(track[-K:]), t.action,
                                             _high_confidence(rng, cfg.conf_noise / 3.0)))
            _step(t, vx, vy, max_x, max_y)
        flows[frame] = FlowField(W, H, vectors.astype(np.float32))
        if not training:
            masks[frame] = mask

    detections.sort(key=lambda d: (d.frame_index, d.target_id))
    segments.sort(key=lambda s: (s.last_frame, s.target_id))
    return Split(tuple(detections), tuple(segments), flows, masks, frame_count)


def generate_synthetic(cfg: SyntheticSceneConfig, K: int = 5) -> Dataset:
    """
    Build a seeded training/testing scene

    Args:
        cfg: scene parameters; cfg.seed (default 0) drives every random draw
        K: track segment length

    Returns:
        Dataset whose testing masks mark the boxes of abnormal targets
    """
    seed = cfg.seed if cfg.seed is not None else 0
    train_rng = rng_stream(seed, "scene/training")
    test_rng = rng_stream(seed, "scene/testing")

    train_targets = [_spawn(train_rng, cfg, f"n{i:03d}", cfg.normal_label, cfg.normal_action,
                            cfg.normal_speed, 0, cfg.train_frames)
                     for i in range(cfg.n_train_targets)]
    training = _simulate(train_targets, cfg.train_frames, cfg, K, train_rng, training=True)

    test_targets = [_spawn(test_rng, cfg, f"n{i:03d}", cfg.normal_label, cfg.normal_action,
                           cfg.normal_speed, 0, cfg.test_frames)
                    for i in range(cfg.n_normal)]
    for i, (start, stop) in enumerate(abnormal_windows(cfg.test_frames, cfg.n_abnormal)):
        kind = cfg.anomaly_kinds[i % len(cfg.anomaly_kinds)]
        label = cfg.novel_label if kind == "novel-object" else cfg.normal_label
        action = cfg.novel_action if kind == "novel-action" else cfg.normal_action
        speed = cfg.fast_speed if kind == "fast-motion" else cfg.normal_speed
        test_targets.append(_spawn(test_rng, cfg, f"a{i:03d}", label, action, speed, start, stop, kind))
    testing = _simulate(test_targets, cfg.test_frames, cfg, K, test_rng, training=False)

    log.info(f"Generated synthetic scene seed={seed}: {len(training.detections)} training and "
             f"{len(testing.detections)} testing detections, anomalies "
             f"{[t.kind for t in test_targets if t.kind]}")
    return Dataset(cfg.frame_width, cfg.frame_height, K, training, testing)
