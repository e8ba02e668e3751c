'''
Configuration dataclasses, the bundled presets and the flat key-value config file.

Config file lines look like ``motion.hmof.magnitude_cap = 1.8``. ``#`` starts a
comment, ``preset = ped2`` selects the starting point, every other key must be
known or the whole file is rejected.
'''
import dataclasses
import math
import os
import typing
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple
from jsonpath_nz import log

from trifuse.core import derive_seed
from trifuse.util import ConfigError

FEATURE_MODES = ("reconstructed", "raw", "hidden")
ACTIVATIONS = ("sigmoid", "tanh", "linear")
MISSING_BRANCH_POLICIES = ("ignore", "zero")
ANOMALY_KINDS = ("novel-object", "novel-action", "fast-motion")


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def _require_seed(seed: Optional[int], key: str):
    _require(seed is None or 0 <= seed < 2 ** 64, f"{key} must be a 64-bit unsigned integer, got {seed}")


@dataclass(frozen=True)
class HmofConfig:
    """Histogram of flow magnitudes: n_bins uniform bins on [0, magnitude_cap) plus one overflow bin"""
    n_bins: int = 8
    magnitude_cap: float = 1.8

    def __post_init__(self):
        _require(self.n_bins >= 2, f"hmof.n_bins must be >= 2, got {self.n_bins}")
        _require(math.isfinite(self.magnitude_cap) and self.magnitude_cap > 0,
                 f"hmof.magnitude_cap must be > 0, got {self.magnitude_cap}")

    @property
    def width(self) -> int:
        return self.n_bins + 1


@dataclass(frozen=True)
class AutoencoderConfig:
    layer_widths: Tuple[int, ...] = (9, 4, 9)
    learning_rate: float = 0.5
    epochs: int = 500
    activation: str = "sigmoid"
    seed: Optional[int] = None

    def __post_init__(self):
        widths = tuple(self.layer_widths)
        _require(len(widths) >= 3 and len(widths) % 2 == 1,
                 f"ae.layer_widths must list an odd number (>= 3) of widths, got {widths}")
        _require(all(w > 0 for w in widths), f"ae.layer_widths must be positive, got {widths}")
        _require(widths == widths[::-1], f"ae.layer_widths must be symmetric, got {widths}")
        _require(self.learning_rate > 0, f"ae.learning_rate must be > 0, got {self.learning_rate}")
        _require(self.epochs >= 0, f"ae.epochs must be >= 0, got {self.epochs}")
        _require(self.activation in ACTIVATIONS,
                 f"ae.activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        _require_seed(self.seed, "ae.seed")


@dataclass(frozen=True)
class GmmConfig:
    k: int = 5
    max_iters: int = 200
    tol: float = 1e-6
    covariance_floor: float = 1e-6
    seed: Optional[int] = None

    def __post_init__(self):
        _require(self.k >= 1, f"gmm.k must be >= 1, got {self.k}")
        _require(self.max_iters >= 1, f"gmm.max_iters must be >= 1, got {self.max_iters}")
        _require(self.tol >= 0, f"gmm.tol must be >= 0, got {self.tol}")
        _require(self.covariance_floor > 0, f"gmm.covariance_floor must be > 0, got {self.covariance_floor}")
        _require_seed(self.seed, "gmm.seed")


@dataclass(frozen=True)
class FusionConfig:
    weights: Tuple[float, float, float] = (1.0, 1.5, 1.5)
    decision_threshold: float = 0.5
    missing_branch_policy: str = "ignore"
    motion_flag_threshold: float = 0.5

    def __post_init__(self):
        _require(len(self.weights) == 3, f"fusion.weights needs 3 values (obj, act, mot), got {self.weights}")
        _require(all(math.isfinite(w) and w >= 0 for w in self.weights),
                 f"fusion.weights must be non-negative, got {self.weights}")
        _require(any(w > 0 for w in self.weights), "fusion.weights must not all be zero")
        _require(0.0 <= self.decision_threshold <= 1.0,
                 f"fusion.decision_threshold must lie in [0,1], got {self.decision_threshold}")
        _require(self.missing_branch_policy in MISSING_BRANCH_POLICIES,
                 f"fusion.missing_branch_policy must be one of {MISSING_BRANCH_POLICIES}")
        _require(0.0 <= self.motion_flag_threshold <= 1.0,
                 f"fusion.motion_flag_threshold must lie in [0,1], got {self.motion_flag_threshold}")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Desk-scale surveillance scene: moving boxes with detector/recognizer outputs and analytic flow"""
    frame_width: int = 160
    frame_height: int = 120
    train_frames: int = 100
    test_frames: int = 150
    n_train_targets: int = 8
    n_normal: int = 4
    n_abnormal: int = 3
    anomaly_kinds: Tuple[str, ...] = ANOMALY_KINDS
    box_size: Tuple[int, int] = (10, 20)
    normal_speed: Tuple[float, float] = (0.3, 0.9)
    fast_speed: Tuple[float, float] = (2.7, 4.0)
    speed_jitter: float = 0.1
    conf_noise: float = 0.03
    flow_noise: float = 0.05
    spurious_rate: float = 0.02
    normal_label: str = "person"
    novel_label: str = "car"
    spurious_label: str = "dog"
    normal_action: str = "walking"
    novel_action: str = "riding"
    seed: Optional[int] = None

    def __post_init__(self):
        bw, bh = self.box_size
        _require(bw > 0 and bh > 0, f"scene.box_size must be positive, got {self.box_size}")
        _require(self.frame_width > bw + 2 and self.frame_height > bh + 2,
                 f"scene frame {self.frame_width}x{self.frame_height} too small for box {self.box_size}")
        _require(self.train_frames >= 1 and self.test_frames >= 1, "scene frame counts must be positive")
        _require(self.n_normal >= 1, "scene.n_normal must be at least 1")
        _require(self.n_train_targets >= 1, "scene.n_train_targets must be at least 1")
        _require(self.n_abnormal >= 0, "scene.n_abnormal must be >= 0")
        _require(self.n_abnormal == 0 or len(self.anomaly_kinds) > 0, "scene.anomaly_kinds is empty")
        for kind in self.anomaly_kinds:
            _require(kind in ANOMALY_KINDS, f"unknown anomaly kind {kind!r}, expected one of {ANOMALY_KINDS}")
        for name in ("normal_speed", "fast_speed"):
            lo, hi = getattr(self, name)
            _require(0 < lo <= hi, f"scene.{name} must be a positive range, got {(lo, hi)}")
        _require(self.speed_jitter >= 0 and self.conf_noise >= 0 and self.flow_noise >= 0,
                 "scene noise levels must be non-negative")
        _require(0.0 <= self.spurious_rate <= 1.0, "scene.spurious_rate must lie in [0,1]")
        _require(len({self.normal_label, self.novel_label, self.spurious_label}) == 3,
                 "scene object labels must be distinct")
        _require(self.normal_action != self.novel_action, "scene actions must be distinct")
        _require_seed(self.seed, "scene.seed")


@dataclass(frozen=True)
class PipelineConfig:
    alpha: float = 0.95
    beta: float = 0.99
    K: int = 5
    hmof: HmofConfig = field(default_factory=HmofConfig)
    ae: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    feature_mode: str = "reconstructed"
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    seed: int = 0

    def __post_init__(self):
        _require(0.0 < self.alpha < 1.0, f"alpha must lie in (0,1), got {self.alpha}")
        _require(0.0 < self.beta < 1.0, f"beta must lie in (0,1), got {self.beta}")
        _require(self.K >= 1, f"K must be a positive integer, got {self.K}")
        _require_seed(self.seed, "seed")
        _require(self.feature_mode in FEATURE_MODES,
                 f"motion.feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        widths = self.ae.layer_widths
        _require(widths[0] == self.hmof.width,
                 f"ae.layer_widths {widths} must start and end with n_bins+1 = {self.hmof.width}")

    @property
    def weights(self) -> Tuple[float, float, float]:
        return self.fusion.weights

    @property
    def decision_threshold(self) -> float:
        return self.fusion.decision_threshold

    def ae_seed(self) -> int:
        return self.ae.seed if self.ae.seed is not None else derive_seed(self.seed, "autoencoder")

    def gmm_seed(self) -> int:
        return self.gmm.seed if self.gmm.seed is not None else derive_seed(self.seed, "gmm")

    def scene_seed(self) -> int:
        return self.scene.seed if self.scene.seed is not None else derive_seed(self.seed, "scene")

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


PRESETS: Dict[str, PipelineConfig] = {
    "umn": PipelineConfig(),
    "ped2": PipelineConfig(hmof=HmofConfig(n_bins=8, magnitude_cap=2.4),
                           fusion=FusionConfig(weights=(1.0, 1.0, 1.0))),
}

#Dotted config keys -> (section attribute or None, field name)
_TOP_KEYS = {
    "seed": (None, "seed"),
    "object.alpha": (None, "alpha"),
    "action.beta": (None, "beta"),
    "action.K": (None, "K"),
    "motion.feature_mode": (None, "feature_mode"),
}
_SECTION_PREFIXES = {
    "motion.hmof.": "hmof",
    "motion.ae.": "ae",
    "motion.gmm.": "gmm",
    "fusion.": "fusion",
    "scene.": "scene",
}


def get_preset(name: str) -> PipelineConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}") from None


def _coerce(text: str, hint) -> Any:
    '''Convert a config value string to the type named by a dataclass field annotation'''
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        return _coerce(text, inner[0])
    if origin in (tuple, Tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(_coerce(p, a) for p, a in zip(parts, args))
    if hint is bool:
        raise ValueError("boolean settings are not supported")
    if hint is int:
        value = int(text, 0) if text.lower().startswith(("0x", "0o", "0b")) else int(text)
        return value
    if hint is float:
        value = float(text)
        if not math.isfinite(value):
            raise ValueError("value must be finite")
        return value
    return text


def _resolve_key(key: str):
    if key in _TOP_KEYS:
        return _TOP_KEYS[key]
    for prefix, section in _SECTION_PREFIXES.items():
        if key.startswith(prefix):
            return section, key[len(prefix):]
    return None, None


def parse_config_text(text: str, source: str = "<config>", base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """
    Parse a flat dotted key-value config

    Args:
        text: file contents
        source: name used in error messages
        base: starting configuration (defaults to the umn preset, or the file's `preset`)

    Returns:
        PipelineConfig
    """
    entries = []
    seen = {}
    preset_name = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        if key == "preset":
            preset_name = value
            continue
        entries.append((lineno, key, value))

    config = get_preset(preset_name) if preset_name else (base or PRESETS["umn"])
    top_updates: Dict[str, Any] = {}
    section_updates: Dict[str, Dict[str, Any]] = {s: {} for s in _SECTION_PREFIXES.values()}
    top_hints = typing.get_type_hints(PipelineConfig)
    for lineno, key, value in entries:
        section, name = _resolve_key(key)
        if name is None:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if section is None:
            hint = top_hints[name]
            target = top_updates
        else:
            section_cls = type(getattr(config, section))
            hints = typing.get_type_hints(section_cls)
            if name not in hints:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            hint = hints[name]
            target = section_updates[section]
        try:
            target[name] = _coerce(value, hint)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value {value!r} for {key}: {e}") from None

    hmof_updates = section_updates["hmof"]
    ae_updates = section_updates["ae"]
    if "n_bins" in hmof_updates and "layer_widths" not in ae_updates:
        # keep the autoencoder input/output width in step with the histogram
        widths = list(config.ae.layer_widths)
        widths[0] = widths[-1] = hmof_updates["n_bins"] + 1
        ae_updates["layer_widths"] = tuple(widths)

    try:
        sections = {s: replace(getattr(config, s), **u) for s, u in section_updates.items() if u}
        config = replace(config, **sections, **top_updates)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e.message}") from None
    return config


def load_config(path: Optional[str] = None, preset: Optional[str] = None,
                seed: Optional[int] = None) -> PipelineConfig:
    '''Resolve preset < config file < explicit seed'''
    base = get_preset(preset) if preset else PRESETS["umn"]
    config = base
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            config = parse_config_text(f.read(), source=path, base=base)
        log.info(f"Loaded config from {path}")
    if seed is not None:
        config = config.with_seed(seed)
    return config


def format_config(config: PipelineConfig) -> str:
    '''Render a config in the file format (round-trips through parse_config_text)'''
    lines = [f"seed = {config.seed}",
             f"object.alpha = {config.alpha!r}",
             f"action.beta = {config.beta!r}",
             f"action.K = {config.K}",
             f"motion.feature_mode = {config.feature_mode}"]
    for prefix, section in _SECTION_PREFIXES.items():
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            elif value is None:
                value = "none"
            lines.append(f"{prefix}{f.name} = {value}")
    return "\n".join(lines) + "\n"
