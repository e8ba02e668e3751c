'''
Shared domain types, batch min-max normalization and seeded random streams.

Every branch produces one raw score per target and normalizes it over the
whole test set, so the helpers here operate on complete score lists.
'''
import zlib
from dataclasses import dataclass, field
from typing import Callable, FrozenSet, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, TypeVar

import numpy as np
from jsonpath_nz import log

from trifuse.util import ConfigError, DataError, NumericError

BBox = Tuple[int, int, int, int]

NORMAL = "normal"
ABNORMAL = "abnormal"
NORMAL_MOTION = "normal motion"
ABNORMAL_MOTION = "abnormal motion"
UNKNOWN_ACTION = "unknown-action"


class TargetRef(NamedTuple):
    frame_index: int
    target_id: str


class BranchScore(NamedTuple):
    raw: float
    normalized: float


class ScoredTarget(NamedTuple):
    ref: TargetRef
    raw: float
    normalized: float


class Explanation(NamedTuple):
    obj_label: str
    act_label: str
    motion_flag: str


def validate_bbox(bbox: Sequence[int], width: int, height: int) -> BBox:
    '''Return bbox as an int tuple, raising DataError if it is empty or leaves the frame'''
    if len(bbox) != 4:
        raise DataError(f"bbox must have 4 values, got {len(bbox)}")
    x, y, w, h = (int(v) for v in bbox)
    if any(int(v) != v for v in bbox):
        raise DataError(f"bbox values must be integers: {list(bbox)}")
    if w <= 0 or h <= 0:
        raise DataError(f"empty region: bbox {list(bbox)}")
    if x < 0 or y < 0 or x + w > width or y + h > height:
        raise DataError(f"bbox {list(bbox)} outside frame {width}x{height}")
    return (x, y, w, h)


def _check_confidence(value: float, name: str) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise DataError(f"{name} must lie in [0,1], got {value}")
    return value


@dataclass(frozen=True)
class Detection:
    """One object-branch observation of a target in a frame"""
    frame_index: int
    target_id: str
    bbox: BBox
    obj_label: str
    obj_conf: float

    def __post_init__(self):
        if self.frame_index < 0:
            raise DataError(f"frame_index must be non-negative, got {self.frame_index}")
        _check_confidence(self.obj_conf, "obj_conf")

    @property
    def ref(self) -> TargetRef:
        return TargetRef(self.frame_index, self.target_id)


@dataclass(frozen=True)
class TrackSegment:
    """K consecutive tracked boxes of one target plus the recognised action"""
    target_id: str
    frames: Tuple[Tuple[int, BBox], ...]
    act_label: str
    act_conf: float

    def __post_init__(self):
        if not self.frames:
            raise DataError(f"track segment of {self.target_id} has no frames")
        _check_confidence(self.act_conf, "act_conf")
        indices = [f for f, _ in self.frames]
        for prev, cur in zip(indices, indices[1:]):
            if cur != prev + 1:
                raise DataError(f"track segment of {self.target_id} is not consecutive: {indices}")

    @property
    def last_frame(self) -> int:
        return self.frames[-1][0]

    @property
    def ref(self) -> TargetRef:
        # scores of a segment are attributed to its last frame
        return TargetRef(self.last_frame, self.target_id)

    def check_length(self, K: int):
        if len(self.frames) != K:
            raise DataError(f"track segment of {self.target_id} ending at frame {self.last_frame} "
                            f"has {len(self.frames)} frames, expected K={K}")


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense optical flow of one frame, vectors shaped (height, width, 2) as (u, v)"""
    width: int
    height: int
    vectors: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"flow size must be positive, got {self.width}x{self.height}")
        if self.vectors.shape != (self.height, self.width, 2):
            raise DataError(f"flow vectors shape {self.vectors.shape} does not match "
                            f"{self.height}x{self.width}x2")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("flow vectors contain non-finite components")

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and self.vectors.dtype == other.vectors.dtype
                and np.array_equal(self.vectors, other.vectors))

    __hash__ = None


@dataclass(frozen=True)
class BranchScores:
    """Per-branch scores of one target in one frame; absent branches are None"""
    target_id: str
    frame_index: int
    sco_obj: Optional[BranchScore] = None
    sco_act: Optional[BranchScore] = None
    sco_mot: Optional[BranchScore] = None
    obj_label: Optional[str] = None
    act_label: Optional[str] = None

    def __post_init__(self):
        for name in ("sco_obj", "sco_act", "sco_mot"):
            score = getattr(self, name)
            if score is not None and not (0.0 <= score.normalized <= 1.0):
                raise NumericError(f"{name} normalized score {score.normalized} outside [0,1]")

    @property
    def ref(self) -> TargetRef:
        return TargetRef(self.frame_index, self.target_id)


@dataclass(frozen=True)
class FusedScore:
    target_id: str
    frame_index: int
    raw: float
    normalized: float
    decision: str
    explanation: Explanation

    @property
    def ref(self) -> TargetRef:
        return TargetRef(self.frame_index, self.target_id)

    @property
    def is_abnormal(self) -> bool:
        return self.decision == ABNORMAL


def _finite_scores(scores: Iterable[float]) -> np.ndarray:
    arr = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"score list must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise DataError("empty score list")
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value in score list")
    return arr


def _span(arr: np.ndarray):
    lo, hi = arr.min(), arr.max()
    if not np.isfinite(hi - lo):
        # halve first so max - min stays representable
        arr, lo, hi = arr / 2.0, lo / 2.0, hi / 2.0
    return arr, lo, hi


def min_max_normalize(scores: Iterable[float]) -> np.ndarray:
    '''
    Map scores linearly onto [0,1]: min -> 0, max -> 1.
    A degenerate list (max == min) maps every element to 0.5.
    '''
    arr, lo, hi = _span(_finite_scores(scores))
    if hi == lo:
        return np.full(arr.shape, 0.5)
    return (arr - lo) / (hi - lo)


def min_max_invert_normalize(scores: Iterable[float]) -> np.ndarray:
    '''Order-reversing counterpart of min_max_normalize: min -> 1, max -> 0'''
    arr, lo, hi = _span(_finite_scores(scores))
    if hi == lo:
        return np.full(arr.shape, 0.5)
    return (hi - arr) / (hi - lo)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    '''Independent, reproducible generator for a named consumer of the run seed'''
    if seed < 0 or seed >= 2 ** 64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


def derive_seed(seed: int, name: str) -> int:
    return int(rng_stream(seed, name).integers(0, 2 ** 63, dtype=np.int64))


@dataclass(frozen=True)
class Whitelist:
    """Labels seen in training with confidence above a threshold; immutable"""
    labels: FrozenSet[str] = field(default_factory=frozenset)

    def __contains__(self, label) -> bool:
        return label in self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.labels))

    def save(self, path: str):
        '''Write labels sorted, one per line'''
        for label in self.labels:
            if "\n" in label or "\r" in label:
                raise DataError(f"label {label!r} cannot be stored in a line-delimited list")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for label in sorted(self.labels):
                f.write(f"{label}\n")
        log.info(f"Saved {len(self.labels)} labels to {path}")

    @classmethod
    def load(cls, path: str):
        try:
            with open(path, "r", encoding="utf-8", newline="") as f:
                labels = [line.rstrip("\r\n") for line in f]
        except FileNotFoundError as e:
            raise DataError(f"File not found: {path}") from e
        return cls(frozenset(label for label in labels if label))


W = TypeVar("W", bound=Whitelist)
R = TypeVar("R")


def build_whitelist(cls: type, observations: Iterable[Tuple[str, float]], threshold: float, name: str) -> W:
    '''Keep every label observed with confidence strictly above threshold'''
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"{name} must lie in (0,1), got {threshold}")
    return cls(frozenset(label for label, conf in observations if conf > threshold))


def signed_confidence(label: str, conf: float, whitelist: Whitelist) -> float:
    '''Known labels lower the anomaly score, unknown labels raise it'''
    return -conf if label in whitelist else conf


def score_batch(records: Sequence[R], raw_of: Callable[[R], float],
                ref_of: Callable[[R], TargetRef]) -> List[ScoredTarget]:
    '''Raw-score every record, then normalize over the whole list'''
    if not records:
        raise DataError("empty score list")
    raws = [raw_of(r) for r in records]
    normalized = min_max_normalize(raws)
    return [ScoredTarget(ref_of(r), float(raw), float(norm))
            for r, raw, norm in zip(records, raws, normalized)]
