# ============================================
# SYNTHDATA.PY: procedural multi-domain datasets
# ============================================
# Two suites:
#   blobs3  : 3 domains, 4 classes, 8-d class-conditional Gaussians + per-domain affine map
#   digits5 : 5 domains, 10 classes, 16x16 seven-segment glyphs + per-domain corruption
# Values are rounded through float32 so dataset files round-trip exactly.

import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from .errors import ConfigError, DataFormatError

logger = logging.getLogger(__name__)

UNLABELED = -1
DATASET_MAGIC = b"TCLDS"
DATASET_VERSION = b"001"
_HEADER = struct.Struct("<IIII")  # n, dim, C, domain_id

GLYPH_SIZE = 16
BLOB_DIM = 8

# split codes mixed into the per-domain seed
SPLIT_TRAIN = 0
SPLIT_TEST = 1


@dataclass(frozen=True)
class Sample:
    domain_id: int
    x: np.ndarray
    label: int = UNLABELED


@dataclass(frozen=True)
class DomainSpec:
    """
    Generator kind plus the parameters of one domain's transform.

    blobs:  rotation (degrees, applied in planes (0,1) and (2,3)), scale, shift, noise.
    digits: rotation (max |angle| per sample), contrast, brightness, noise
            (background texture amplitude), background pattern id, invert.
    """
    name: str
    kind: str
    domain_id: int
    num_classes: int
    n_samples: int
    rotation: float = 0.0
    scale: float = 1.0
    shift: float = 0.0
    contrast: float = 1.0
    brightness: float = 0.0
    noise: float = 0.0
    background: int = 0
    invert: bool = False

    @property
    def dim(self) -> int:
        return GLYPH_SIZE * GLYPH_SIZE if self.kind == "digits" else BLOB_DIM

    @property
    def image_shape(self) -> Optional[Tuple[int, int]]:
        return (GLYPH_SIZE, GLYPH_SIZE) if self.kind == "digits" else None

    @property
    def is_identity(self) -> bool:
        return (self.rotation == 0 and self.scale == 1 and self.shift == 0 and self.contrast == 1
                and self.brightness == 0 and self.noise == 0 and self.background == 0 and not self.invert)


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str = "weak"              # weak | strong
    flip_prob: float = 0.5
    max_shift: int = 1              # pixels
    jitter: float = 0.02            # blobs: Gaussian jitter sigma
    noise: float = 0.1              # strong only
    erase: int = 4                  # strong only, square patch side
    gain: Tuple[float, float] = (0.8, 1.2)  # strong only

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ConfigError(f"unknown augmentation kind '{self.kind}'")


@dataclass
class DomainData:
    """One domain's samples as dense arrays. Labels are always the true labels."""
    spec: DomainSpec
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return int(self.x.shape[0])

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def domain_id(self) -> int:
        return self.spec.domain_id

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    def samples(self, labeled: bool = True) -> List[Sample]:
        return [
            Sample(self.domain_id, self.x[i].copy(), int(self.y[i]) if labeled else UNLABELED)
            for i in range(len(self))
        ]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.spec.num_classes)


@dataclass(frozen=True)
class SuiteDef:
    name: str
    kind: str
    num_classes: int
    domains: Tuple[DomainSpec, ...]
    default_target: str
    default_n: int
    weak: AugmentPolicy
    strong: AugmentPolicy

    def domain(self, name: str) -> DomainSpec:
        for spec in self.domains:
            if spec.name == name:
                return spec
        raise ConfigError(f"suite '{self.name}' has no domain '{name}' (known: {', '.join(self.names)})")

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.domains]


@dataclass
class SuiteData:
    suite: SuiteDef
    sources: List[DomainData]
    target: DomainData
    target_test: DomainData = field(repr=False, default=None)


# --- SUITES ---

def _blobs(name, domain_id, **kw) -> DomainSpec:
    return DomainSpec(name=name, kind="blobs", domain_id=domain_id, num_classes=4, n_samples=600, **kw)


def _digits(name, domain_id, **kw) -> DomainSpec:
    return DomainSpec(name=name, kind="digits", domain_id=domain_id, num_classes=10, n_samples=1000, **kw)


SUITES: Dict[str, SuiteDef] = {
    "blobs3": SuiteDef(
        name="blobs3",
        kind="blobs",
        num_classes=4,
        domains=(
            _blobs("plain", 0),
            _blobs("tilted", 1, rotation=30.0, scale=1.3, shift=0.5),
            _blobs("warped", 2, rotation=-40.0, scale=0.8, shift=-0.5, noise=0.3),
        ),
        default_target="warped",
        default_n=600,
        weak=AugmentPolicy("weak", flip_prob=0.0, jitter=0.02),
        strong=AugmentPolicy("strong", flip_prob=0.0, jitter=0.02, noise=0.1),
    ),
    # flips stay off for digits: a mirrored 2 reads as a 5
    "digits5": SuiteDef(
        name="digits5",
        kind="digits",
        num_classes=10,
        domains=(
            _digits("clean", 0),
            _digits("inverted", 1, invert=True),
            _digits("noisy_bg", 2, noise=0.6, background=1),
            _digits("rotated", 3, rotation=15.0),
            _digits("low_contrast", 4, contrast=0.3, brightness=0.35),
        ),
        default_target="noisy_bg",
        default_n=1000,
        weak=AugmentPolicy("weak", flip_prob=0.0, max_shift=1),
        strong=AugmentPolicy("strong", flip_prob=0.0, max_shift=1, noise=0.1, erase=4),
    ),
}


def get_suite(name: str) -> SuiteDef:
    try:
        return SUITES[str(name)]
    except KeyError:
        raise ConfigError(f"unknown suite '{name}' (known: {', '.join(SUITES)})") from None


# --- GENERATION ---

def _streams(spec: DomainSpec, seed: int, split: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """(base, transform) generators for one domain split."""
    base, transform = np.random.SeedSequence([seed, spec.domain_id, split]).spawn(2)
    return np.random.default_rng(base), np.random.default_rng(transform)


def _stratified_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes).astype(np.int64)


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# seven-segment layout in a 16x16 box: a b c d e f g
_SEGMENTS = {
    "a": ((4, 2), (11, 2)),
    "b": ((11, 2), (11, 7)),
    "c": ((11, 7), (11, 13)),
    "d": ((4, 13), (11, 13)),
    "e": ((4, 7), (4, 13)),
    "f": ((4, 2), (4, 7)),
    "g": ((4, 7), (11, 7)),
}
_DIGIT_SEGMENTS = ("abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg")


def render_glyph(digit: int, dx: int = 0, dy: int = 0, width: int = 1, intensity: int = 255) -> Image.Image:
    img = Image.new("L", (GLYPH_SIZE, GLYPH_SIZE), 0)
    draw = ImageDraw.Draw(img)
    for seg in _DIGIT_SEGMENTS[digit]:
        (x0, y0), (x1, y1) = _SEGMENTS[seg]
        draw.line([(x0 + dx, y0 + dy), (x1 + dx, y1 + dy)], fill=intensity, width=width)
    return img


def _glyph_array(img: Image.Image) -> np.ndarray:
    return np.asarray(img, dtype=np.float64).reshape(-1) / 255.0


def _blob_means(num_classes: int) -> np.ndarray:
    means = np.zeros((num_classes, BLOB_DIM))
    means[np.arange(num_classes), np.arange(num_classes)] = 3.0
    return means


def _blob_rotation(degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    rot = np.eye(BLOB_DIM)
    for i in (0, 2):
        rot[i:i + 2, i:i + 2] = [[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]
    return rot


def base_samples(spec: DomainSpec, seed: int, split: int = SPLIT_TRAIN) -> Tuple[np.ndarray, np.ndarray]:
    """Untransformed samples (clean glyphs / class Gaussians) for a domain split."""
    rng, _ = _streams(spec, seed, split)
    n = spec.n_samples
    labels = _stratified_labels(n, spec.num_classes, rng)
    if spec.kind == "blobs":
        x = _blob_means(spec.num_classes)[labels] + rng.standard_normal((n, BLOB_DIM))
        return _f32(x), labels

    x = np.zeros((n, spec.dim))
    shifts = rng.integers(-1, 2, size=(n, 2))
    widths = rng.integers(1, 3, size=n)
    intensity = rng.integers(200, 256, size=n)
    for i in range(n):
        img = render_glyph(int(labels[i]), int(shifts[i, 0]), int(shifts[i, 1]), int(widths[i]), int(intensity[i]))
        x[i] = _glyph_array(img)
    return _f32(x), labels


def _background(pattern: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sample texture; pattern 1 adds diagonal stripes at a random phase."""
    bg = rng.uniform(0.0, amplitude, size=(GLYPH_SIZE, GLYPH_SIZE))
    if pattern == 1:
        phase = rng.integers(0, 4)
        yy, xx = np.mgrid[0:GLYPH_SIZE, 0:GLYPH_SIZE]
        bg = np.where((xx + yy + phase) % 4 == 0, np.maximum(bg, amplitude), bg)
    return bg.reshape(-1)


def _transform_digits(spec: DomainSpec, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = x.copy()
    n = out.shape[0]
    if spec.rotation:
        angles = rng.uniform(-spec.rotation, spec.rotation, size=n)
        for i in range(n):
            img = Image.fromarray(np.round(out[i] * 255).astype(np.uint8).reshape(GLYPH_SIZE, GLYPH_SIZE))
            img = img.rotate(float(angles[i]), resample=Image.Resampling.BILINEAR, fillcolor=0)
            out[i] = _glyph_array(img)
    if spec.noise or spec.background:
        for i in range(n):
            out[i] = np.maximum(out[i], _background(spec.background, spec.noise, rng))
    if spec.invert:
        out = 1.0 - out
    if spec.contrast != 1 or spec.brightness:
        out = spec.brightness + spec.contrast * out
    return out


def _transform_blobs(spec: DomainSpec, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = x @ _blob_rotation(spec.rotation).T * spec.scale + spec.shift
    if spec.noise:
        out = out + rng.normal(0.0, spec.noise, size=out.shape)
    return out


def generate_domain(spec: DomainSpec, seed: int, split: int = SPLIT_TRAIN) -> DomainData:
    """Deterministic given (spec, seed, split). The identity domain equals base_samples exactly."""
    if spec.n_samples < 0:
        raise ConfigError(f"{spec.name}: n_samples must not be negative")
    x, labels = base_samples(spec, seed, split)
    if not spec.is_identity:
        _, rng = _streams(spec, seed, split)
        x = _transform_digits(spec, x, rng) if spec.kind == "digits" else _transform_blobs(spec, x, rng)
        x = _f32(x)
    return DomainData(spec=spec, x=x, y=labels)


def load_suite(name: str, seed: int, target: Optional[str] = None, sources: Optional[Sequence[str]] = None,
               n_per_domain: Optional[int] = None, n_test: int = 1000) -> SuiteData:
    """Generate every domain a run needs: sources, the target train split and a held-out target split."""
    suite = get_suite(name)
    target = target or suite.default_target
    target_spec = suite.domain(target)
    source_names = list(sources) if sources else [n for n in suite.names if n != target]
    if not source_names:
        raise ConfigError("at least one source domain is required")
    if target in source_names:
        raise ConfigError(f"domain '{target}' cannot be both source and target")
    n = n_per_domain or suite.default_n

    data = [generate_domain(replace(suite.domain(s), n_samples=n), seed) for s in source_names]
    tgt = generate_domain(replace(target_spec, n_samples=n), seed)
    test = generate_domain(replace(target_spec, n_samples=n_test), seed, split=SPLIT_TEST)
    logger.debug(f"suite {name}: sources={source_names} target={target} n={n} n_test={n_test}")
    return SuiteData(suite=suite, sources=data, target=tgt, target_test=test)


# --- AUGMENTATION ---

def _shift_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def augment(x: np.ndarray, policy: AugmentPolicy, seed, image_shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    weak   = horizontal flip (w.p. flip_prob) + integer shift in [-max_shift, max_shift]^2
             for rasters, Gaussian jitter for vectors.
    strong = weak followed by additive noise, a zeroed erase patch (rasters) and per-value gain.
    `seed` may be an int or a Generator; draws happen in a fixed order.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)

    if image_shape is not None:
        img = x.reshape(image_shape)
        if rng.random() < policy.flip_prob:
            img = img[:, ::-1]
        dx, dy = rng.integers(-policy.max_shift, policy.max_shift + 1, size=2)
        img = _shift_image(img, int(dx), int(dy))
        out = img.reshape(-1).copy()
    else:
        out = x + rng.normal(0.0, policy.jitter, size=x.shape) if policy.jitter else x.copy()

    if policy.kind == "strong":
        if policy.noise:
            out = out + rng.normal(0.0, policy.noise, size=out.shape)
        if image_shape is not None and policy.erase:
            h, w = image_shape
            r0 = int(rng.integers(0, h - policy.erase + 1))
            c0 = int(rng.integers(0, w - policy.erase + 1))
            img = out.reshape(image_shape)
            img[r0:r0 + policy.erase, c0:c0 + policy.erase] = 0.0
        lo, hi = policy.gain
        if (lo, hi) != (1.0, 1.0):
            out = out * rng.uniform(lo, hi, size=out.shape)
    return out


def augment_batch(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
                  image_shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    return np.stack([augment(row, policy, rng, image_shape) for row in np.asarray(x)]) if len(x) else np.asarray(x).copy()


def make_views(x: np.ndarray, weak: AugmentPolicy, strong: AugmentPolicy, rng: np.random.Generator,
               target: bool = False, image_shape: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    (query_view, key_view) for a batch. Source: both weak. Target: strong query,
    weak key, so pseudo-labels come from the cleaner view.
    """
    query = augment_batch(x, strong if target else weak, rng, image_shape)
    key = augment_batch(x, weak, rng, image_shape)
    return query, key


# --- DATASET FILES ---

def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("label", "<i4"), ("x", "<f4", (dim,))])


def write_dataset(path: str, data: DomainData) -> None:
    n, dim = len(data), data.spec.dim
    records = np.zeros(n, dtype=_record_dtype(dim))
    records["label"] = data.y
    records["x"] = data.x.reshape(n, dim)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC + DATASET_VERSION)
        f.write(_HEADER.pack(n, dim, data.spec.num_classes, data.spec.domain_id))
        f.write(records.tobytes())


def read_dataset(path: str, expected_dim: Optional[int] = None, spec: Optional[DomainSpec] = None) -> DomainData:
    with open(path, "rb") as f:
        raw = f.read()
    head = len(DATASET_MAGIC) + len(DATASET_VERSION)
    if raw[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    if raw[len(DATASET_MAGIC):head] != DATASET_VERSION:
        raise DataFormatError(f"{path}: unsupported dataset version {raw[len(DATASET_MAGIC):head]!r}")
    if len(raw) < head + _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    n, dim, num_classes, domain_id = _HEADER.unpack_from(raw, head)
    if expected_dim is not None and dim != expected_dim:
        raise DataFormatError(f"{path}: header dim {dim} does not match expected {expected_dim}")
    dtype = _record_dtype(dim)
    body = raw[head + _HEADER.size:]
    if len(body) != n * dtype.itemsize:
        kind = "truncated" if len(body) < n * dtype.itemsize else "trailing bytes in"
        raise DataFormatError(f"{path}: {kind} records ({len(body)} bytes for {n} x {dtype.itemsize})")
    records = np.frombuffer(body, dtype=dtype, count=n)
    labels = records["label"].astype(np.int64)
    if n and (labels.min() < UNLABELED or labels.max() >= num_classes):
        raise DataFormatError(f"{path}: labels outside [-1, {num_classes})")

    kind = "digits" if dim == GLYPH_SIZE * GLYPH_SIZE else "blobs"
    if spec is None:
        spec = DomainSpec(name=f"domain-{domain_id}", kind=kind, domain_id=domain_id,
                          num_classes=num_classes, n_samples=n)
    else:
        spec = replace(spec, n_samples=n)
    x = records["x"].astype(np.float64).reshape(n, dim)
    return DomainData(spec=spec, x=x, y=labels)


def to_frame(data: DomainData) -> pd.DataFrame:
    frame = pd.DataFrame(data.x, columns=[f"x{i}" for i in range(data.dim)])
    frame.insert(0, "label", data.y)
    return frame


def write_csv(path: str, data: DomainData) -> None:
    to_frame(data).to_csv(path, index=False)


def read_csv(path: str, spec: DomainSpec) -> DomainData:
    frame = pd.read_csv(path, float_precision="round_trip")
    expected = ["label"] + [f"x{i}" for i in range(spec.dim)]
    if list(frame.columns) != expected:
        raise DataFormatError(f"{path}: expected header label,x0,...,x{spec.dim - 1}")
    x = frame[expected[1:]].to_numpy(dtype=np.float64).reshape(len(frame), spec.dim)
    return DomainData(spec=replace(spec, n_samples=len(frame)), x=x, y=frame["label"].to_numpy(dtype=np.int64))
