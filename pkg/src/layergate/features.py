"""Feature store: on-disk formats, stimulus windows, and planted synthetic data.

Cached network activations are kept layer-resolved: one tensor per modality of
shape (layers, frames, channels) on a fixed stimulus-time grid, half precision
on disk and float32 in memory.  Targets and predictions are (k_out, parcels)
matrices on the TR grid.  A JSON manifest ties the files of one dataset
together.

The planted generator builds datasets whose targets depend, by construction,
on exactly one layer per modality, so that layer-selection behaviour can be
tested against a known ground truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .validation import as_float_array, check_finite, check_positive_int

__all__ = [
    "MODALITIES",
    "MODALITY_CODES",
    "FormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedPayloadError",
    "LayerResolvedFeatures",
    "StimulusWindow",
    "PlantedSpec",
    "PlantedDataset",
    "write_features",
    "read_features",
    "write_prediction",
    "read_prediction",
    "tr_block_bounds",
    "pool_to_tr",
    "pool_matrix",
    "smooth_causal",
    "make_planted_spec",
    "generate_planted_dataset",
    "save_dataset",
    "load_dataset",
]

# Canonical modality order; fusion concatenates and ties break in this order.
MODALITIES = ("vision", "audio", "text")
MODALITY_CODES = {"vision": 0, "audio": 1, "text": 2}
_CODE_TO_MODALITY = {code: name for name, code in MODALITY_CODES.items()}

_FEATURE_MAGIC = b"MIRF"
_FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sBBIIIf")  # magic, version, modality, L, T, d, frame_rate

_PREDICTION_MAGIC = b"MIRP"
_PREDICTION_VERSION = 1
_PREDICTION_HEADER = struct.Struct("<4sBIII")  # magic, version, subject, k_out, parcels


class FormatError(ValueError):
    """Base class for binary container violations."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """File declares a format version this reader does not understand."""


class TruncatedPayloadError(FormatError):
    """File is shorter than its header promises."""


@dataclass
class LayerResolvedFeatures:
    """One modality's cached activations: (layers, frames, channels) float32."""

    modality: str
    data: np.ndarray
    frame_rate_hz: float = 2.0

    def __post_init__(self):
        if self.modality not in MODALITY_CODES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"feature data must be (layers, frames, channels), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"feature axes must all be >= 1, got shape {self.data.shape}")
        check_finite(self.data, "feature data")
        if not (self.frame_rate_hz > 0):
            raise ValueError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]


@dataclass
class StimulusWindow:
    """One contiguous stimulus segment: per-modality features plus its target."""

    window_id: str
    subject: int
    features: dict[str, LayerResolvedFeatures]
    target: np.ndarray  # (k_out, parcels)

    def __post_init__(self):
        if self.subject < 0:
            raise ValueError(f"subject must be >= 0, got {self.subject}")
        for name in self.features:
            if name not in MODALITY_CODES:
                raise ValueError(f"unknown modality {name!r} in window {self.window_id}")
        frames = {f.n_frames for f in self.features.values()}
        if len(frames) > 1:
            raise ValueError(f"window {self.window_id}: modalities disagree on frame count {sorted(frames)}")
        self.target = np.ascontiguousarray(self.target, dtype=np.float32)
        if self.target.ndim != 2:
            raise ValueError(f"target must be (k_out, parcels), got shape {self.target.shape}")
        check_finite(self.target, "target")

    @property
    def n_frames(self) -> int:
        return next(iter(self.features.values())).n_frames

    @property
    def k_out(self) -> int:
        return self.target.shape[0]

    @property
    def parcels(self) -> int:
        return self.target.shape[1]


# ---------------------------------------------------------------------------
# Binary feature container
# ---------------------------------------------------------------------------

def write_features(path, feats: LayerResolvedFeatures) -> Path:
    """Serialize features: 22-byte header, then row-major float16 payload.

    The payload must survive the half-precision cast: entries whose float16
    image is non-finite are rejected rather than silently saturated.
    """
    path = Path(path)
    with np.errstate(over="ignore"):
        half = feats.data.astype("<f2")
    if not np.all(np.isfinite(half.astype(np.float32))):
        raise ValueError("feature data overflows half precision; rescale before writing")
    L, T, d = feats.data.shape
    header = _FEATURE_HEADER.pack(
        _FEATURE_MAGIC,
        _FEATURE_VERSION,
        MODALITY_CODES[feats.modality],
        L,
        T,
        d,
        feats.frame_rate_hz,
    )
    path.write_bytes(header + half.tobytes(order="C"))
    return path


def read_features(path) -> LayerResolvedFeatures:
    """Read a feature file back to float32, checking magic/version/size."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != _FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (magic {raw[:4]!r})")
    if len(raw) < _FEATURE_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated at {len(raw)} bytes")
    _, version, code, L, T, d, frame_rate = _FEATURE_HEADER.unpack_from(raw)
    if version != _FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {_FEATURE_VERSION}")
    if code not in _CODE_TO_MODALITY:
        raise FormatError(f"{path}: unknown modality code {code}")
    if min(L, T, d) < 1:
        raise FormatError(f"{path}: header declares empty axis (L={L}, T={T}, d={d})")
    expected = L * T * d * 2
    payload = raw[_FEATURE_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedPayloadError(f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    data = np.frombuffer(payload, dtype="<f2").reshape(L, T, d).astype(np.float32)
    return LayerResolvedFeatures(modality=_CODE_TO_MODALITY[code], data=data, frame_rate_hz=float(frame_rate))


def write_prediction(path, matrix: np.ndarray, subject: int) -> Path:
    """Serialize a (k_out, parcels) matrix: 17-byte header + float32 payload."""
    path = Path(path)
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError(f"prediction must be (k_out, parcels), got shape {matrix.shape}")
    check_finite(matrix, "prediction")
    header = _PREDICTION_HEADER.pack(
        _PREDICTION_MAGIC, _PREDICTION_VERSION, int(subject), matrix.shape[0], matrix.shape[1]
    )
    path.write_bytes(header + matrix.tobytes(order="C"))
    return path


def read_prediction(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != _PREDICTION_MAGIC:
        raise BadMagicError(f"{path}: not a prediction file (magic {raw[:4]!r})")
    if len(raw) < _PREDICTION_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated at {len(raw)} bytes")
    _, version, subject, k_out, parcels = _PREDICTION_HEADER.unpack_from(raw)
    if version != _PREDICTION_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {_PREDICTION_VERSION}")
    payload = raw[_PREDICTION_HEADER.size:]
    expected = k_out * parcels * 4
    if len(payload) != expected:
        raise TruncatedPayloadError(f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(k_out, parcels).copy()
    return matrix, int(subject)


# ---------------------------------------------------------------------------
# Stimulus-grid to TR-grid pooling
# ---------------------------------------------------------------------------

def tr_block_bounds(n_frames: int, k_out: int) -> np.ndarray:
    """Half-open block boundaries: block j covers [j*T//K, (j+1)*T//K).

    Integer arithmetic keeps the boundaries exact; every block is non-empty
    whenever T >= K, and the blocks tile [0, T) without overlap.
    """
    check_positive_int(n_frames, "n_frames")
    check_positive_int(k_out, "k_out")
    if k_out > n_frames:
        raise ValueError(f"k_out ({k_out}) exceeds frame count ({n_frames})")
    return (np.arange(k_out + 1, dtype=np.int64) * n_frames) // k_out


def pool_to_tr(frames: np.ndarray, k_out: int) -> np.ndarray:
    """Block-average (T, d) rows down to (k_out, d)."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError(f"frames must be 2-d, got shape {frames.shape}")
    bounds = tr_block_bounds(frames.shape[0], k_out)
    sums = np.add.reduceat(frames, bounds[:-1], axis=0)
    widths = np.diff(bounds).astype(frames.dtype if frames.dtype.kind == "f" else np.float64)
    return sums / widths[:, None]


def pool_matrix(n_frames: int, k_out: int, dtype=np.float32) -> np.ndarray:
    """Dense (k_out, n_frames) operator performing the same block average."""
    bounds = tr_block_bounds(n_frames, k_out)
    mat = np.zeros((k_out, n_frames), dtype=dtype)
    for j in range(k_out):
        lo, hi = bounds[j], bounds[j + 1]
        mat[j, lo:hi] = 1.0 / (hi - lo)
    return mat


def smooth_causal(frames: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Causal temporal smoothing: out[t] = sum_j kernel[j] * frames[t - j].

    Steps before the sequence start contribute zero (no renormalization at the
    edge), so the operator is strictly lower-triangular-banded in time.
    """
    frames = np.asarray(frames, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64).ravel()
    out = np.zeros_like(frames)
    for j, w in enumerate(kernel):
        if j == 0:
            out += w * frames
        else:
            out[j:] += w * frames[:-j]
    return out


# ---------------------------------------------------------------------------
# Planted synthetic data
# ---------------------------------------------------------------------------

@dataclass
class PlantedSpec:
    """Recipe for synthetic data whose targets read out one layer per modality.

    Features are standard-normal frames plus a fixed per-layer signature offset
    (drawn once per dataset, scaled by ``signature_scale``).  Without the
    signatures the layers would be statistically exchangeable and no
    content-keyed mechanism could locate the planted layer; setting
    ``signature_scale=0`` removes them.

    ``weights`` maps the concatenation of the planted layer's channels (in
    canonical modality order, only modalities present in ``layer_counts``) to
    parcels.  Targets are smoothed with ``kernel`` along frames, block-averaged
    down to ``k_out`` rows, and perturbed with ``noise_std`` Gaussian noise.
    """

    layer_counts: dict[str, int]
    feature_dims: dict[str, int]
    planted_layers: dict[str, int]
    weights: np.ndarray
    noise_std: float
    kernel: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    n_frames: int = 100
    k_out: int = 20
    n_subjects: int = 2
    frame_rate_hz: float = 2.0
    signature_scale: float = 1.0

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64).ravel()
        if self.kernel.size < 1:
            raise ValueError("kernel must have at least one tap")
        if abs(self.kernel.sum() - 1.0) > 1e-6:
            raise ValueError(f"kernel must sum to 1, got {self.kernel.sum()}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.signature_scale < 0:
            raise ValueError(f"signature_scale must be >= 0, got {self.signature_scale}")
        for m in self.layer_counts:
            if m not in MODALITY_CODES:
                raise ValueError(f"unknown modality {m!r}")
            check_positive_int(self.layer_counts[m], f"layer_counts[{m}]")
            check_positive_int(self.feature_dims[m], f"feature_dims[{m}]")
            layer = self.planted_layers[m]
            if not (0 <= layer < self.layer_counts[m]):
                raise ValueError(
                    f"planted layer {layer} out of range for {m} with {self.layer_counts[m]} layers"
                )
        check_positive_int(self.n_frames, "n_frames")
        check_positive_int(self.k_out, "k_out")
        check_positive_int(self.n_subjects, "n_subjects")
        if self.k_out > self.n_frames:
            raise ValueError("k_out may not exceed n_frames")
        self.weights = as_float_array(self.weights, "weights", ndim=2)
        check_finite(self.weights, "weights")
        if self.weights.shape[0] != self.total_channels:
            raise ValueError(
                f"weights expect {self.weights.shape[0]} input channels, "
                f"modalities provide {self.total_channels}"
            )

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.layer_counts)

    @property
    def total_channels(self) -> int:
        return sum(self.feature_dims[m] for m in self.modalities)

    @property
    def parcels(self) -> int:
        return self.weights.shape[1]


@dataclass
class PlantedDataset:
    windows: list[StimulusWindow]
    spec: PlantedSpec
    seed: int
    signatures: dict[str, np.ndarray]  # per modality: (layers, channels)


def _pooled_noise_variance(spec: PlantedSpec) -> float:
    """Variance of one unit-variance channel after smoothing and TR pooling.

    For an interior TR block of width F the pooled value is (1/F) * sum of F
    consecutive smoothed samples; the coefficients on the underlying frames are
    conv(ones(F), kernel) / F, so the variance is the squared norm of that
    vector.
    """
    width = max(spec.n_frames // spec.k_out, 1)
    coeffs = np.convolve(np.ones(width), spec.kernel) / width
    return float(np.sum(coeffs**2))


def make_planted_spec(
    layer_counts: dict[str, int],
    feature_dims: dict[str, int],
    planted_layers: dict[str, int],
    parcels: int,
    *,
    noise_std: float = 0.1,
    kernel=(1.0,),
    n_frames: int = 100,
    k_out: int = 20,
    n_subjects: int = 2,
    frame_rate_hz: float = 2.0,
    signature_scale: float = 1.0,
    used_modalities=None,
    partition_parcels: bool = False,
    map_seed: int = 0,
    calibrate: bool = True,
) -> PlantedSpec:
    """Draw and (optionally) calibrate a planted read-out map.

    ``used_modalities`` restricts which modality blocks receive non-zero
    weight; with ``partition_parcels`` the parcels are split into contiguous
    blocks, one per used modality, each driven purely by that modality.  With
    ``calibrate`` the columns are rescaled so the noiseless target fluctuation
    has unit standard deviation, making ``noise_std`` directly interpretable.
    """
    present = tuple(m for m in MODALITIES if m in layer_counts)
    used = tuple(m for m in present if used_modalities is None or m in used_modalities)
    if not used:
        raise ValueError("at least one modality must drive the targets")
    rng = np.random.default_rng(map_seed)
    total = sum(feature_dims[m] for m in present)
    weights = np.zeros((total, parcels), dtype=np.float64)

    offsets = {}
    pos = 0
    for m in present:
        offsets[m] = pos
        pos += feature_dims[m]

    if partition_parcels:
        cuts = np.linspace(0, parcels, len(used) + 1).astype(int)
        parcel_blocks = {m: slice(cuts[i], cuts[i + 1]) for i, m in enumerate(used)}
    else:
        parcel_blocks = {m: slice(0, parcels) for m in used}

    for m in used:
        rows = slice(offsets[m], offsets[m] + feature_dims[m])
        cols = parcel_blocks[m]
        weights[rows, cols] = rng.standard_normal((feature_dims[m], cols.stop - cols.start))

    spec = PlantedSpec(
        layer_counts=dict(layer_counts),
        feature_dims=dict(feature_dims),
        planted_layers=dict(planted_layers),
        weights=weights,
        noise_std=noise_std,
        kernel=np.asarray(kernel, dtype=np.float64),
        n_frames=n_frames,
        k_out=k_out,
        n_subjects=n_subjects,
        frame_rate_hz=frame_rate_hz,
        signature_scale=signature_scale,
    )
    if calibrate:
        v_eff = _pooled_noise_variance(spec)
        norms = np.sqrt((weights**2).sum(axis=0) * v_eff)
        norms[norms == 0] = 1.0
        spec = replace(spec, weights=weights / norms)
    return spec


def generate_planted_dataset(spec: PlantedSpec, n_windows: int, seed: int) -> PlantedDataset:
    """Generate windows deterministically from ``seed``.

    Draw order is fixed (signatures first, then per window: features in
    canonical modality order, then the noise matrix), and the noise matrix is
    drawn even when ``noise_std`` is zero, so two specs differing only in
    ``noise_std`` produce identical features and differ only in the additive
    noise term.
    """
    check_positive_int(n_windows, "n_windows")
    rng = np.random.default_rng(seed)
    signatures = {
        m: spec.signature_scale * rng.standard_normal((spec.layer_counts[m], spec.feature_dims[m]))
        for m in spec.modalities
    }

    windows = []
    for idx in range(n_windows):
        feats = {}
        planted_parts = []
        for m in spec.modalities:
            L, d = spec.layer_counts[m], spec.feature_dims[m]
            noise = rng.standard_normal((L, spec.n_frames, d))
            data = noise + signatures[m][:, None, :]
            feats[m] = LayerResolvedFeatures(m, data.astype(np.float32), spec.frame_rate_hz)
            planted_parts.append(data[spec.planted_layers[m]])
        planted = np.concatenate(planted_parts, axis=1)  # (T, total_channels)
        clean = pool_to_tr(smooth_causal(planted, spec.kernel), spec.k_out) @ spec.weights
        noise_draw = rng.standard_normal(clean.shape)
        target = clean + spec.noise_std * noise_draw
        windows.append(
            StimulusWindow(
                window_id=f"w{idx:04d}",
                subject=idx % spec.n_subjects,
                features=feats,
                target=target.astype(np.float32),
            )
        )
    return PlantedDataset(windows=windows, spec=spec, seed=seed, signatures=signatures)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

def save_dataset(windows: list[StimulusWindow], out_dir, frame_rate_hz: float = 2.0) -> Path:
    """Write features, targets and a manifest; returns the manifest path."""
    if not windows:
        raise ValueError("cannot save an empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for win in windows:
        feature_paths = {}
        for m, feats in sorted(win.features.items()):
            name = f"{win.window_id}_{m}.mirf"
            write_features(out_dir / name, feats)
            feature_paths[m] = name
        target_name = f"{win.window_id}_target.mirp"
        write_prediction(out_dir / target_name, win.target, win.subject)
        entries.append(
            {
                "id": win.window_id,
                "subject": win.subject,
                "features": feature_paths,
                "target": target_name,
            }
        )
    manifest = {
        "frame_rate_hz": frame_rate_hz,
        "k_out": windows[0].k_out,
        "parcels": windows[0].parcels,
        "windows": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def load_dataset(manifest_path) -> tuple[list[StimulusWindow], dict]:
    """Load all windows referenced by a manifest; paths resolve relative to it."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    base = manifest_path.parent
    required = {"frame_rate_hz", "k_out", "parcels", "windows"}
    missing = required - manifest.keys()
    if missing:
        raise FormatError(f"manifest missing keys: {sorted(missing)}")
    windows = []
    for entry in manifest["windows"]:
        feats = {m: read_features(base / rel) for m, rel in entry["features"].items()}
        target, subject = read_prediction(base / entry["target"])
        if subject != entry["subject"]:
            raise FormatError(
                f"window {entry['id']}: manifest subject {entry['subject']} != target file subject {subject}"
            )
        windows.append(
            StimulusWindow(
                window_id=entry["id"],
                subject=entry["subject"],
                features=feats,
                target=target,
            )
        )
    return windows, manifest
