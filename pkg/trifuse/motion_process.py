'''
Motion branch: HMOF features per target, a small fully connected autoencoder
trained by full-batch gradient descent, and a diagonal-covariance GMM fitted by EM.

Model files are little-endian: 4 magic bytes, u32 format version, u32 dimensions,
then float64 parameters in row-major order.
'''
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from jsonpath_nz import log
from scipy.special import expit, logsumexp

from trifuse.config import AutoencoderConfig, GmmConfig, HmofConfig, ACTIVATIONS
from trifuse.core import BBox, Detection, FlowField, ScoredTarget, TargetRef, min_max_invert_normalize
from trifuse.util import BinaryReader, DataError, NumericError, read_binary

AE_MAGIC = b"TFAE"
GMM_MAGIC = b"TFGM"
MODEL_FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)
_EMPTY_COMPONENT = 1e-10


@dataclass(frozen=True, eq=False)
class HmofFeature:
    bins: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, HmofFeature):
            return NotImplemented
        return np.array_equal(self.bins, other.bins)

    __hash__ = None


def compute_hmof(flow: FlowField, bbox: BBox, cfg: HmofConfig) -> HmofFeature:
    """
    Histogram of flow magnitudes inside a target box

    Pixel magnitude m = sqrt(u^2 + v^2) goes to bin floor(m / (cap / n)) when m < cap,
    otherwise to the overflow bin n. Counts are divided by the pixel count.
    """
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise DataError(f"empty region: bbox {list(bbox)}")
    if x < 0 or y < 0 or x + w > flow.width or y + h > flow.height:
        raise DataError(f"bbox {list(bbox)} outside flow field {flow.width}x{flow.height}")

    region = flow.vectors[y:y + h, x:x + w].astype(np.float64)
    magnitude = np.hypot(region[..., 0], region[..., 1]).ravel()
    bin_width = cfg.magnitude_cap / cfg.n_bins
    # m < cap can still round to n after division
    inside = np.minimum(np.floor(magnitude / bin_width), cfg.n_bins - 1)
    index = np.where(magnitude < cfg.magnitude_cap, inside, cfg.n_bins).astype(np.intp)
    counts = np.bincount(index, minlength=cfg.n_bins + 1)
    return HmofFeature(counts / float(magnitude.size))


def hmof_for_detections(detections: Sequence[Detection], flows: Dict[int, FlowField],
                        cfg: HmofConfig) -> List[Tuple[TargetRef, np.ndarray]]:
    '''One HMOF per detection, using the flow of the detection's frame'''
    features = []
    for d in detections:
        flow = flows.get(d.frame_index)
        if flow is None:
            raise DataError(f"no flow field for frame {d.frame_index} (target {d.target_id})")
        features.append((d.ref, compute_hmof(flow, d.bbox, cfg).bins))
    return features


# ---------------------------------------------------------------- autoencoder

def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "sigmoid":
        return expit(z)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _activation_slope(a: np.ndarray, activation: str) -> np.ndarray:
    '''Derivative expressed through the activation output'''
    if activation == "sigmoid":
        return a * (1.0 - a)
    if activation == "tanh":
        return 1.0 - a * a
    return np.ones_like(a)


@dataclass
class AutoencoderModel:
    """Fully connected autoencoder; hidden layers use `activation`, the output layer is linear"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = "sigmoid"
    loss_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DataError("autoencoder needs one bias vector per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DataError(f"layer {i}: weight {W.shape} and bias {b.shape} do not fit")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise DataError(f"layer {i} input width {W.shape[0]} != previous output width")
        if self.widths[0] != self.widths[-1]:
            raise DataError(f"decoder output width {self.widths[-1]} != input width {self.widths[0]}")

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def code_layer(self) -> int:
        return len(self.weights) // 2

    @classmethod
    def initialize(cls, cfg: AutoencoderConfig, seed: int) -> "AutoencoderModel":
        '''uniform(-0.5, 0.5) weights and biases drawn from the seed'''
        rng = np.random.default_rng(seed)
        widths = cfg.layer_widths
        weights, biases = [], []
        for n_in, n_out in zip(widths, widths[1:]):
            weights.append(rng.uniform(-0.5, 0.5, size=(n_in, n_out)))
            biases.append(rng.uniform(-0.5, 0.5, size=n_out))
        return cls(weights, biases, cfg.activation)

    @classmethod
    def identity(cls, width: int, depth: int = 2) -> "AutoencoderModel":
        '''Linear model whose every layer is the identity map'''
        return cls([np.eye(width) for _ in range(depth)], [np.zeros(width) for _ in range(depth)], "linear")

    def parameters(self) -> List[np.ndarray]:
        params = []
        for W, b in zip(self.weights, self.biases):
            params.extend((W, b))
        return params

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_parameters(self, flat: np.ndarray):
        offset = 0
        for p in self.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise DataError(f"parameter vector has {flat.size} values, model needs {offset}")

    def forward(self, X: np.ndarray) -> List[np.ndarray]:
        '''Activations of every layer, input first'''
        acts = [X]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ W + b
            acts.append(z if i == last else _activate(z, self.activation))
        return acts


def _as_batch(features, width: int) -> np.ndarray:
    X = np.asarray([f.bins if isinstance(f, HmofFeature) else f for f in features], dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != width:
        raise DataError(f"feature width {X.shape[-1] if X.ndim else 0} does not match model width {width}")
    return X


def loss_and_gradient(model: AutoencoderModel, X: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """
    Mean squared reconstruction error over all entries and its gradient

    Returns:
        (loss, gradients ordered like model.parameters())
    """
    acts = model.forward(X)
    residual = acts[-1] - X
    loss = float(np.mean(residual * residual))
    delta = 2.0 * residual / residual.size
    grads: List[np.ndarray] = []
    for i in range(len(model.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(acts[i].T @ delta)
        if i:
            delta = (delta @ model.weights[i].T) * _activation_slope(acts[i], model.activation)
    grads.reverse()
    return loss, grads


def train_autoencoder(features: Sequence, cfg: AutoencoderConfig, seed: Optional[int] = None) -> AutoencoderModel:
    """
    Full-batch gradient descent on the reconstruction MSE

    Args:
        features: HmofFeature objects or plain vectors
        cfg: widths, learning rate, epochs
        seed: initialization seed (falls back to cfg.seed, then 0)

    Returns:
        AutoencoderModel with loss_history[e] = loss after e epochs (length epochs + 1)
    """
    if not len(features):
        raise DataError("no features to train the autoencoder on")
    X = _as_batch(features, cfg.layer_widths[0])
    seed = seed if seed is not None else (cfg.seed if cfg.seed is not None else 0)
    model = AutoencoderModel.initialize(cfg, seed)

    loss, grads = loss_and_gradient(model, X)
    model.loss_history = [loss]
    for epoch in range(1, cfg.epochs + 1):
        for p, g in zip(model.parameters(), grads):
            p -= cfg.learning_rate * g
        loss, grads = loss_and_gradient(model, X)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericError(f"autoencoder training diverged at epoch {epoch} (loss={loss})")
        model.loss_history.append(loss)
        if epoch % 100 == 0:
            log.info(f"autoencoder epoch {epoch}/{cfg.epochs} loss={loss:.6g}")
    log.info(f"autoencoder trained on {len(X)} features: loss {model.loss_history[0]:.6g} -> {loss:.6g}")
    return model


def reconstruct(model: AutoencoderModel, f) -> np.ndarray:
    '''Decoder output for one feature'''
    return model.forward(_as_batch([f], model.input_width))[-1][0]


def reconstruct_batch(model: AutoencoderModel, X) -> np.ndarray:
    return model.forward(_as_batch(X, model.input_width))[-1]


def encode_batch(model: AutoencoderModel, X) -> np.ndarray:
    '''Hidden code at the narrowest (middle) layer'''
    return model.forward(_as_batch(X, model.input_width))[model.code_layer]


def motion_representation(X, autoencoder: Optional[AutoencoderModel], feature_mode: str) -> np.ndarray:
    '''The vectors the GMM sees: raw HMOF, reconstructed HMOF or hidden codes'''
    if feature_mode == "raw" or autoencoder is None:
        return np.asarray(X, dtype=np.float64)
    if feature_mode == "hidden":
        return encode_batch(autoencoder, X)
    return reconstruct_batch(autoencoder, X)


# ---------------------------------------------------------------------- GMM

@dataclass
class GmmModel:
    """Diagonal-covariance Gaussian mixture"""
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood_history: List[float] = field(default_factory=list)
    converged: bool = False
    reseeds: int = 0

    def __post_init__(self):
        k = self.weights.shape[0]
        if self.means.ndim != 2 or self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise DataError(f"inconsistent GMM shapes: weights {self.weights.shape}, "
                            f"means {self.means.shape}, variances {self.variances.shape}")
        if np.any(self.variances <= 0):
            raise DataError("GMM variances must be positive")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_iter(self) -> int:
        return len(self.log_likelihood_history)


def _log_joint(X: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    '''log w_j + log N(x_i; mu_j, diag(var_j)), shape (n, k)'''
    d = X.shape[1]
    log_det = np.sum(np.log(variances), axis=1)
    diff = X[:, None, :] - means[None, :, :]
    maha = np.sum(diff * diff / variances[None, :, :], axis=2)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w[None, :] - 0.5 * (d * LOG_2PI + log_det[None, :] + maha)


def _kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm(features, cfg: GmmConfig, seed: Optional[int] = None) -> GmmModel:
    """
    Fit a diagonal GMM by EM with k-means++ seeding

    Stops when the relative improvement of the mean log-likelihood drops below
    cfg.tol or after cfg.max_iters EM steps. The history ends with the mean
    log-likelihood of the returned parameters.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError(f"GMM features must be a non-empty 2-D array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericError("GMM features contain non-finite values")
    n, d = X.shape
    k = cfg.k
    if k > n:
        raise DataError(f"gmm.k={k} exceeds the number of training samples ({n})")

    seed = seed if seed is not None else (cfg.seed if cfg.seed is not None else 0)
    rng = np.random.default_rng(seed)
    floor = cfg.covariance_floor
    global_var = np.maximum(X.var(axis=0), floor)

    weights = np.full(k, 1.0 / k)
    means = _kmeans_plus_plus(X, k, rng)
    variances = np.tile(global_var, (k, 1))

    history: List[float] = []
    converged = False
    reseeds = 0
    check = False
    for iteration in range(cfg.max_iters):
        log_p = _log_joint(X, weights, means, variances)
        log_norm = logsumexp(log_p, axis=1)
        ll = float(np.mean(log_norm))
        if check and ll - history[-1] <= cfg.tol * max(abs(history[-1]), np.finfo(float).tiny):
            history.append(ll)
            converged = True
            break
        history.append(ll)
        check = True

        resp = np.exp(log_p - log_norm[:, None])
        nk = resp.sum(axis=0)
        empty = nk < _EMPTY_COMPONENT
        safe_nk = np.where(empty, 1.0, nk)
        weights = nk / n
        means = (resp.T @ X) / safe_nk[:, None]
        for j in range(k):
            diff = X - means[j]
            variances[j] = np.maximum(resp[:, j] @ (diff * diff) / safe_nk[j], floor)

        if np.any(empty):
            # re-seed from the worst-explained samples, lowest likelihood first
            order = np.argsort(log_norm, kind="stable")
            for slot, j in enumerate(np.flatnonzero(empty)):
                means[j] = X[order[slot % n]]
                variances[j] = global_var
                weights[j] = 1.0 / n
            weights = weights / weights.sum()
            reseeds += int(empty.sum())
            # the next likelihood is not comparable with the last one
            check = False
            log.warning(f"GMM iteration {iteration}: re-seeded {int(empty.sum())} empty component(s)")
    else:
        log_norm = logsumexp(_log_joint(X, weights, means, variances), axis=1)
        history.append(float(np.mean(log_norm)))

    log.info(f"GMM k={k} fitted on {n}x{d} features: {len(history)} evaluations, "
             f"mean log-likelihood {history[-1]:.6g}, converged={converged}")
    return GmmModel(weights, means, variances.copy(), history, converged, reseeds)


def gmm_score_samples(model: GmmModel, X) -> np.ndarray:
    '''Per-sample log-likelihood under the mixture'''
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.dim:
        raise DataError(f"feature width {X.shape[1]} does not match GMM width {model.dim}")
    return logsumexp(_log_joint(X, model.weights, model.means, model.variances), axis=1)


def gmm_log_likelihood(model: GmmModel, x) -> float:
    return float(gmm_score_samples(model, np.asarray(x, dtype=np.float64)[None, :])[0])


def score_motion_batch(test_features: Sequence[Tuple[TargetRef, np.ndarray]], model: GmmModel,
                       autoencoder: Optional[AutoencoderModel] = None,
                       feature_mode: str = "raw") -> List[ScoredTarget]:
    """
    Motion anomaly scores: GMM log-likelihood as the raw score, inverted min-max normalization

    Args:
        test_features: (target ref, HMOF vector) pairs
        model: GMM fitted on training representations
        autoencoder: model used when feature_mode is "reconstructed" or "hidden"
        feature_mode: representation handed to the GMM
    """
    if not test_features:
        raise DataError("empty score list")
    refs = [ref for ref, _ in test_features]
    X = np.asarray([vec for _, vec in test_features], dtype=np.float64)
    raws = gmm_score_samples(model, motion_representation(X, autoencoder, feature_mode))
    normalized = min_max_invert_normalize(raws)
    return [ScoredTarget(ref, float(raw), float(norm)) for ref, raw, norm in zip(refs, raws, normalized)]


@dataclass
class MotionModels:
    autoencoder: AutoencoderModel
    gmm: GmmModel
    feature_mode: str


def fit_motion_branch(train_features: Sequence[np.ndarray], ae_cfg: AutoencoderConfig, gmm_cfg: GmmConfig,
                      feature_mode: str, ae_seed: int, gmm_seed: int) -> MotionModels:
    '''Train the autoencoder, then fit the GMM on the representation selected by feature_mode'''
    X = np.asarray(train_features, dtype=np.float64)
    autoencoder = train_autoencoder(X, ae_cfg, seed=ae_seed)
    gmm = fit_gmm(motion_representation(X, autoencoder, feature_mode), gmm_cfg, seed=gmm_seed)
    return MotionModels(autoencoder, gmm, feature_mode)


# -------------------------------------------------------------- model files

_ACTIVATION_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def _f64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")


def save_autoencoder(model: AutoencoderModel, path: str):
    widths = model.widths
    parts = [struct.pack("<4sIII", AE_MAGIC, MODEL_FORMAT_VERSION, len(model.weights),
                         _ACTIVATION_CODES[model.activation]),
             struct.pack(f"<{len(widths)}I", *widths)]
    for W, b in zip(model.weights, model.biases):
        parts.extend((_f64(W), _f64(b)))
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    log.info(f"Saved autoencoder {widths} to {path}")


def load_autoencoder(path: str) -> AutoencoderModel:
    reader = BinaryReader(read_binary(path), path)
    magic, version, n_layers, act_code = reader.read_struct("<4sIII")
    if magic != AE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {AE_MAGIC!r}")
    if version != MODEL_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    if n_layers < 1 or act_code >= len(ACTIVATIONS):
        raise DataError(f"{path}: invalid layer count {n_layers} or activation code {act_code}")
    widths = reader.read_struct(f"<{n_layers + 1}I", "layer widths")
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
        weights.append(reader.read_array((n_in, n_out), "<f8", f"layer {i} weights"))
        biases.append(reader.read_array((n_out,), "<f8", f"layer {i} biases"))
    reader.expect_end()
    return AutoencoderModel([w.astype(np.float64) for w in weights], [b.astype(np.float64) for b in biases],
                            ACTIVATIONS[act_code])


def save_gmm(model: GmmModel, path: str):
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", GMM_MAGIC, MODEL_FORMAT_VERSION, model.k, model.dim))
        f.write(_f64(model.weights))
        f.write(_f64(model.means))
        f.write(_f64(model.variances))
    log.info(f"Saved GMM k={model.k} d={model.dim} to {path}")


def load_gmm(path: str) -> GmmModel:
    reader = BinaryReader(read_binary(path), path)
    magic, version, k, d = reader.read_struct("<4sIII")
    if magic != GMM_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {GMM_MAGIC!r}")
    if version != MODEL_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    weights = reader.read_array((k,), "<f8", "weights").astype(np.float64)
    means = reader.read_array((k, d), "<f8", "means").astype(np.float64)
    variances = reader.read_array((k, d), "<f8", "variances").astype(np.float64)
    reader.expect_end()
    return GmmModel(weights, means, variances)
