'''
Dataset, result and ROC file formats.

Dataset layout under a root directory:
    manifest.json
    <split>/detections.jsonl      one detection per line
    <split>/segments.jsonl        one track segment per line
    <split>/flow/<frame:06d>.flo  TFFL binary flow field
    testing/masks/<frame:06d>.pgm binary PGM, 0 normal / 255 abnormal
'''
import os
import re
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Sequence, Tuple

import cv2
import numpy as np
from jsonpath_nz import log

from trifuse.core import Detection, FlowField, TrackSegment, validate_bbox
from trifuse.evaluation import RocCurve
from trifuse.fusion_process import ResultRecord
from trifuse.util import BinaryReader, DataError, TrifuseError, load_dict_from_file, read_binary, save_dict_to_file

DATASET_FORMAT = "trifuse-dataset"
DATASET_VERSION = 1
FLOW_MAGIC = b"TFFL"
FLOW_VERSION = 1
SPLITS = ("training", "testing")

_FRAME_FILE = re.compile(r"^(\d{6})\.(flo|pgm)$")


@dataclass(eq=False)
class Split:
    detections: Tuple[Detection, ...] = ()
    segments: Tuple[TrackSegment, ...] = ()
    flows: Dict[int, FlowField] = field(default_factory=dict)
    masks: Dict[int, np.ndarray] = field(default_factory=dict)
    frame_count: int = 0

    def __eq__(self, other):
        if not isinstance(other, Split):
            return NotImplemented
        return (self.frame_count == other.frame_count
                and self.detections == other.detections
                and self.segments == other.segments
                and self.flows == other.flows
                and self.masks.keys() == other.masks.keys()
                and all(np.array_equal(m, other.masks[f]) for f, m in self.masks.items()))


@dataclass(eq=True)
class Dataset:
    frame_width: int
    frame_height: int
    K: int
    training: Split
    testing: Split


# ------------------------------------------------------------------ records

def _detection_from_json(obj: Mapping[str, Any], width: int, height: int) -> Detection:
    return Detection(
        frame_index=int(obj["frame_index"]),
        target_id=str(obj["target_id"]),
        bbox=validate_bbox(obj["bbox"], width, height),
        obj_label=str(obj["obj_label"]),
        obj_conf=float(obj["obj_conf"]),
    )


def _detection_to_json(d: Detection) -> Dict[str, Any]:
    return {"frame_index": d.frame_index, "target_id": d.target_id, "bbox": list(d.bbox),
            "obj_label": d.obj_label, "obj_conf": d.obj_conf}


def _segment_from_json(obj: Mapping[str, Any], width: int, height: int) -> TrackSegment:
    frames = tuple((int(f), validate_bbox(b, width, height)) for f, b in obj["frames"])
    return TrackSegment(target_id=str(obj["target_id"]), frames=frames,
                        act_label=str(obj["act_label"]), act_conf=float(obj["act_conf"]))


def _segment_to_json(s: TrackSegment) -> Dict[str, Any]:
    return {"target_id": s.target_id, "frames": [[f, list(b)] for f, b in s.frames],
            "act_label": s.act_label, "act_conf": s.act_conf}


def _read_jsonl(path: str) -> Iterator[Tuple[int, Dict[str, Any]]]:
    if not os.path.exists(path):
        raise DataError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _write_jsonl(rows: Sequence[Dict[str, Any]], path: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True))
            f.write("\n")


def _parse_records(path: str, parse, width: int, height: int) -> List[Tuple[int, Any]]:
    records = []
    for lineno, obj in _read_jsonl(path):
        try:
            records.append((lineno, parse(obj, width, height)))
        except KeyError as e:
            raise DataError(f"{path}:{lineno}: missing field {e}") from e
        except (TypeError, ValueError) as e:
            if isinstance(e, TrifuseError):
                raise DataError(f"{path}:{lineno}: {e.message}") from e
            raise DataError(f"{path}:{lineno}: {e}") from e
    return records


# --------------------------------------------------------------- flow files

def save_flow(flow: FlowField, path: str):
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", FLOW_MAGIC, FLOW_VERSION, flow.width, flow.height))
        f.write(np.ascontiguousarray(flow.vectors, dtype="<f4").tobytes(order="C"))


def load_flow(path: str) -> FlowField:
    reader = BinaryReader(read_binary(path), path)
    magic, version, width, height = reader.read_struct("<4sIII", "flow header")
    if magic != FLOW_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {FLOW_MAGIC!r}")
    if version != FLOW_VERSION:
        raise DataError(f"{path}: unsupported flow version {version}")
    vectors = reader.read_array((height, width, 2), "<f4", "flow payload").astype(np.float32)
    reader.expect_end()
    try:
        return FlowField(width, height, vectors)
    except DataError as e:
        raise DataError(f"{path}: {e.message}") from e


# --------------------------------------------------------------- mask files

def save_mask(mask: np.ndarray, path: str):
    if not cv2.imwrite(path, np.ascontiguousarray(mask, dtype=np.uint8)):
        raise DataError(f"Failed to write mask {path}")


def load_mask(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"File not found: {path}")
    mask = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if mask is None or mask.ndim != 2 or mask.dtype != np.uint8:
        raise DataError(f"{path}: not an 8-bit single-channel PGM")
    bad = ~np.isin(mask, (0, 255))
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise DataError(f"{path}: pixel ({x},{y}) has value {mask[y, x]}, expected 0 or 255")
    return mask


def _frame_files(directory: str, extension: str) -> Dict[int, str]:
    files = {}
    if not os.path.isdir(directory):
        return files
    for name in sorted(os.listdir(directory)):
        match = _FRAME_FILE.match(name)
        if not match or match.group(2) != extension:
            raise DataError(f"{os.path.join(directory, name)}: unexpected file name, expected NNNNNN.{extension}")
        files[int(match.group(1))] = os.path.join(directory, name)
    return files


# ------------------------------------------------------------------ dataset

def _check_frame(frame: int, frame_count: int, where: str):
    if not 0 <= frame < frame_count:
        raise DataError(f"{where}: dangling frame {frame} (split has {frame_count} frames)")


def _load_split(root: str, name: str, width: int, height: int, K: int, frame_count: int) -> Split:
    base = os.path.join(root, name)
    det_path = os.path.join(base, "detections.jsonl")
    seg_path = os.path.join(base, "segments.jsonl")

    detections = []
    seen = set()
    for lineno, d in _parse_records(det_path, _detection_from_json, width, height):
        where = f"{det_path}:{lineno}"
        _check_frame(d.frame_index, frame_count, where)
        if d.ref in seen:
            raise DataError(f"{where}: duplicate detection of target {d.target_id} in frame {d.frame_index}")
        seen.add(d.ref)
        detections.append(d)
    target_ids = {d.target_id for d in detections}

    segments = []
    seen = set()
    for lineno, s in _parse_records(seg_path, _segment_from_json, width, height):
        where = f"{seg_path}:{lineno}"
        for frame, _ in s.frames:
            _check_frame(frame, frame_count, where)
        try:
            s.check_length(K)
        except DataError as e:
            raise DataError(f"{where}: {e.message}") from e
        if s.target_id not in target_ids:
            raise DataError(f"{where}: segment references unknown target {s.target_id}")
        if s.ref in seen:
            raise DataError(f"{where}: duplicate segment of target {s.target_id} ending at frame {s.last_frame}")
        seen.add(s.ref)
        segments.append(s)

    flows = {}
    for frame, path in _frame_files(os.path.join(base, "flow"), "flo").items():
        _check_frame(frame, frame_count, path)
        flow = load_flow(path)
        if (flow.width, flow.height) != (width, height):
            raise DataError(f"{path}: flow is {flow.width}x{flow.height}, frames are {width}x{height}")
        flows[frame] = flow
    for d in detections:
        if d.frame_index not in flows:
            raise DataError(f"{det_path}: frame {d.frame_index} has detections but no flow file")

    masks = {}
    if name == "testing":
        for frame, path in _frame_files(os.path.join(base, "masks"), "pgm").items():
            _check_frame(frame, frame_count, path)
            mask = load_mask(path)
            if mask.shape != (height, width):
                raise DataError(f"{path}: mask is {mask.shape[1]}x{mask.shape[0]}, frames are {width}x{height}")
            masks[frame] = mask
        missing = [f for f in range(frame_count) if f not in masks]
        if missing:
            raise DataError(f"{os.path.join(base, 'masks')}: no ground-truth mask for frame {missing[0]}")

    return Split(tuple(detections), tuple(segments), flows, masks, frame_count)


def load_dataset(root: str) -> Dataset:
    """
    Load and validate a dataset directory

    Every referenced frame must lie inside its split, segment targets must have
    detections, frames with detections need a flow file and every testing frame
    needs a mask. Errors name the file and the line or byte offset.
    """
    manifest_path = os.path.join(root, "manifest.json")
    manifest = load_dict_from_file(manifest_path)
    try:
        if manifest["format"] != DATASET_FORMAT:
            raise DataError(f"{manifest_path}: format {manifest['format']!r} is not {DATASET_FORMAT!r}")
        if manifest["version"] != DATASET_VERSION:
            raise DataError(f"{manifest_path}: unsupported dataset version {manifest['version']}")
        width, height, K = int(manifest["frame_width"]), int(manifest["frame_height"]), int(manifest["K"])
        counts = {name: int(manifest[name]["frame_count"]) for name in SPLITS}
    except (KeyError, TypeError) as e:
        raise DataError(f"{manifest_path}: missing or malformed field {e}") from e
    if width <= 0 or height <= 0 or K <= 0 or any(c < 0 for c in counts.values()):
        raise DataError(f"{manifest_path}: frame size, K and frame counts must be positive")

    splits = {name: _load_split(root, name, width, height, K, counts[name]) for name in SPLITS}
    dataset = Dataset(width, height, K, splits["training"], splits["testing"])
    log.info(f"Loaded dataset {root}: {len(dataset.training.detections)} training / "
             f"{len(dataset.testing.detections)} testing detections, {width}x{height}, K={K}")
    return dataset


def save_dataset(dataset: Dataset, root: str):
    '''Write a dataset directory readable by load_dataset'''
    try:
        save_dict_to_file({
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "frame_width": dataset.frame_width,
            "frame_height": dataset.frame_height,
            "K": dataset.K,
            "training": {"frame_count": dataset.training.frame_count},
            "testing": {"frame_count": dataset.testing.frame_count},
        }, os.path.join(root, "manifest.json"))
        for name in SPLITS:
            split: Split = getattr(dataset, name)
            base = os.path.join(root, name)
            detections = sorted(split.detections, key=lambda d: (d.frame_index, d.target_id))
            segments = sorted(split.segments, key=lambda s: (s.last_frame, s.target_id))
            _write_jsonl([_detection_to_json(d) for d in detections], os.path.join(base, "detections.jsonl"))
            _write_jsonl([_segment_to_json(s) for s in segments], os.path.join(base, "segments.jsonl"))
            os.makedirs(os.path.join(base, "flow"), exist_ok=True)
            for frame, flow in sorted(split.flows.items()):
                save_flow(flow, os.path.join(base, "flow", f"{frame:06d}.flo"))
            if name == "testing":
                os.makedirs(os.path.join(base, "masks"), exist_ok=True)
                for frame, mask in sorted(split.masks.items()):
                    save_mask(mask, os.path.join(base, "masks", f"{frame:06d}.pgm"))
        log.info(f"Saved dataset to {root}")
    except Exception as e:
        log.error(f"Failed to save dataset to {root}: {e}")
        log.traceback(e)
        raise


# ------------------------------------------------------------------ results

def write_results(records: Sequence[ResultRecord], path: str):
    ordered = sorted(records, key=lambda r: (r.frame_index, r.target_id))
    _write_jsonl([r.to_json_dict() for r in ordered], path)
    log.info(f"Wrote {len(ordered)} result records to {path}")


def read_results(path: str) -> List[ResultRecord]:
    records = []
    for lineno, obj in _read_jsonl(path):
        try:
            records.append(ResultRecord.from_json_dict(obj))
        except KeyError as e:
            raise DataError(f"{path}:{lineno}: missing field {e}") from e
        except (TypeError, ValueError) as e:
            message = e.message if isinstance(e, TrifuseError) else str(e)
            raise DataError(f"{path}:{lineno}: {message}") from e
    return records


def write_explanations(records: Sequence[ResultRecord], path: str, abnormal_only: bool = False) -> List[Dict[str, Any]]:
    '''One line per target-frame: where it is, how abnormal, and why'''
    rows = [{"frame_index": r.frame_index, "target_id": r.target_id, "bbox": list(r.bbox),
             "fused": r.fused.normalized, "decision": r.fused.decision, "explanation": list(r.fused.explanation)}
            for r in sorted(records, key=lambda r: (r.frame_index, r.target_id))
            if r.fused.is_abnormal or not abnormal_only]
    _write_jsonl(rows, path)
    return rows


def write_roc(curve: RocCurve, path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for fpr, tpr in curve.points:
            f.write(f"{fpr:.17g} {tpr:.17g}\n")


def write_plot_data(curves: Mapping[str, RocCurve], path: str):
    '''CSV with columns curve,fpr,tpr for every curve, curves in sorted order'''
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("curve,fpr,tpr\n")
        for name in sorted(curves):
            for fpr, tpr in curves[name].points:
                f.write(f"{name},{fpr:.17g},{tpr:.17g}\n")
