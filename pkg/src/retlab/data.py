"""Dataset ingestion, preprocessing, synthetic data, and fold planning.

Real data comes in as class-per-directory image trees (`root/AD/*.png`,
`root/HC/*.png`) or, for volumetric scans, one directory of ordered slice
images per volume (`root/<class>/<volume>/<slice>.png`); every slice
inherits its volume's label and subject id. Preprocessing is bilinear
resize plus rescaling 8-bit values to [0, 1].

Synthetic generators stand in for clinical data at desk scale: the
single-channel kind renders a horizontal bright band whose thickness
separates the classes (mimicking layer-thickness biomarkers), the
three-channel kind renders a bright disc plus curved vessel strokes whose
width and contrast separate them. Both are deterministic in the seed.

Fold planning produces nested cross-validation splits: outer test folds
partition the data, the remainder splits into inner validation/train
folds, optionally grouped so all slices of one subject stay together.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .util import substream

LABEL_POSITIVE = 1   # diseased
LABEL_NEGATIVE = 0   # healthy control

_CLASS_DIR_LABELS = {"AD": LABEL_POSITIVE, "HC": LABEL_NEGATIVE}
_IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


class DataError(ValueError):
    """Unreadable, malformed, or degenerate input data."""


@dataclass
class ImageSample:
    """One preprocessed image with provenance."""

    pixels: np.ndarray          # (H, W, C) float64 in [0, 1]
    label: int
    source: str
    subject_id: str


@dataclass
class Dataset:
    samples: list[ImageSample]
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return counts

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.intp)

    def images(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.samples])

    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.samples]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[int(i)] for i in indices])


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize; constant inputs stay constant and
    outputs never leave the input value hull."""
    if out_h < 1 or out_w < 1:
        raise DataError(f"target size must be positive, got {out_h}x{out_w}")
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w, _ = image.shape
    if (h, w) == (out_h, out_w):
        out = image.copy()
        return out[..., 0] if squeeze else out

    def _axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if n_out == 1:
            pos = np.array([(n_in - 1) / 2.0])
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r_lo, r_hi, r_f = _axis_coords(h, out_h)
    c_lo, c_hi, c_f = _axis_coords(w, out_w)
    rows = image[r_lo] * (1.0 - r_f)[:, None, None] + image[r_hi] * r_f[:, None, None]
    out = rows[:, c_lo] * (1.0 - c_f)[None, :, None] + rows[:, c_hi] * c_f[None, :, None]
    return out[..., 0] if squeeze else out


def rescale_unit(image: np.ndarray) -> np.ndarray:
    """Map [0, 255] values onto [0, 1] by dividing by 255."""
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0.0 or image.max() > 255.0:
        raise DataError(
            f"values outside [0, 255]: min {image.min():.3f}, max {image.max():.3f}")
    return image / 255.0


def preprocess(image: np.ndarray, image_size: int) -> np.ndarray:
    """Resize to the model size and bring 8-bit values onto [0, 1].

    Integer input is treated as 8-bit and rescaled; float input is assumed
    already on [0, 1], which makes the whole step idempotent.
    """
    arr = np.asarray(image)
    integer_valued = np.issubdtype(arr.dtype, np.integer)
    out = resize_bilinear(arr, image_size, image_size)
    if integer_valued:
        out = rescale_unit(out)
    if out.ndim == 2:
        out = out[..., None]
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _decode_image(path: str, channels: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            return np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def _class_directories(root: str) -> dict[str, int]:
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root} is not a directory")
    mapping: dict[str, int] = {}
    for entry in sorted(os.listdir(root)):
        full = os.path.join(root, entry)
        if not os.path.isdir(full):
            continue
        label = _CLASS_DIR_LABELS.get(entry.upper())
        if label is None:
            raise DataError(f"unknown class directory {entry!r} (expected AD or HC)")
        mapping[entry] = label
    if not mapping:
        raise DataError(f"no class directories under {root}")
    return mapping


def load_image_dataset(root: str, image_size: int, channels: int = 3) -> Dataset:
    """Load `root/<class>/<image>` trees; deterministic lexicographic order.

    Files with unrecognized extensions are skipped with a warning record;
    undecodable image files raise.
    """
    samples: list[ImageSample] = []
    warnings: list[str] = []
    for class_dir, label in _class_directories(root).items():
        full = os.path.join(root, class_dir)
        names = sorted(os.listdir(full))
        count_before = len(samples)
        for name in names:
            path = os.path.join(full, name)
            if not os.path.isfile(path):
                continue
            if os.path.splitext(name)[1].lower() not in _IMAGE_EXTENSIONS:
                warnings.append(f"skipped non-image file {path}")
                continue
            raw = _decode_image(path, channels)
            pixels = preprocess(raw, image_size)
            samples.append(ImageSample(pixels, label, path,
                                       subject_id=os.path.splitext(name)[0]))
        if len(samples) == count_before:
            raise DataError(f"class directory {full} holds no images")
    return Dataset(samples, warnings)


def slice_oct_volume(volume_dir: str, label: int, subject_id: str,
                     image_size: int) -> list[ImageSample]:
    """One 2-D sample per ordered slice image; all inherit the volume's
    label and subject id."""
    if not os.path.isdir(volume_dir):
        raise DataError(f"volume {volume_dir} is not a directory")
    names = [n for n in sorted(os.listdir(volume_dir))
             if os.path.splitext(n)[1].lower() in _IMAGE_EXTENSIONS]
    if not names:
        raise DataError(f"volume {volume_dir} holds no slice images")
    samples = []
    for name in names:
        path = os.path.join(volume_dir, name)
        raw = _decode_image(path, channels=1)
        samples.append(ImageSample(preprocess(raw, image_size), label, path, subject_id))
    return samples


def load_oct_dataset(root: str, image_size: int) -> Dataset:
    """Load `root/<class>/<volume>/<slice>.png` trees of volume slices."""
    samples: list[ImageSample] = []
    for class_dir, label in _class_directories(root).items():
        class_path = os.path.join(root, class_dir)
        volumes = sorted(d for d in os.listdir(class_path)
                         if os.path.isdir(os.path.join(class_path, d)))
        if not volumes:
            raise DataError(f"class directory {class_path} holds no volumes")
        for volume in volumes:
            samples.extend(slice_oct_volume(os.path.join(class_path, volume),
                                            label, volume, image_size))
    return Dataset(samples)


def save_image_png(path: str, pixels: np.ndarray) -> None:
    """Write [0, 1] pixels as an 8-bit PNG (grayscale or RGB)."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(data, mode).save(path)


# ---------------------------------------------------------------------------
# oversampling
# ---------------------------------------------------------------------------


def random_oversample(indices, labels, seed: int) -> np.ndarray:
    """Duplicate minority-class indices (uniformly, with replacement) until
    both classes are equally frequent. Keeps every original index."""
    indices = np.asarray(indices, dtype=np.intp)
    labels = np.asarray(labels)
    sub = labels[indices]
    classes, counts = np.unique(sub, return_counts=True)
    if classes.size < 2:
        raise DataError("cannot oversample a single-class training set")
    if counts.max() == counts.min():
        return indices.copy()
    minority = classes[np.argmin(counts)]
    pool = indices[sub == minority]
    extra = substream(seed, "oversample").choice(pool, size=counts.max() - counts.min(),
                                                 replace=True)
    return np.concatenate([indices, extra])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

_BAND_CENTER = 0.45       # fraction of image height
_BAND_THICKNESS = 0.18    # mean thickness fraction, classes sit at +-effect/2
_CENTER_JITTER = 0.02
_THICKNESS_JITTER = 0.01


def oct_band_rows(image_size: int, effect_strength: float) -> tuple[int, int]:
    """Row range that can contain the class-discriminative band."""
    half_max = (_BAND_THICKNESS + effect_strength / 2.0 + 2 * _THICKNESS_JITTER) / 2.0
    lo = (_BAND_CENTER - _CENTER_JITTER - half_max) * image_size - 1.0
    hi = (_BAND_CENTER + _CENTER_JITTER + half_max) * image_size + 1.0
    return max(0, int(np.floor(lo))), min(image_size - 1, int(np.ceil(hi)))


def _render_band_image(size: int, label: int, effect: float, noise: float,
                       rng: np.random.Generator) -> np.ndarray:
    center = (_BAND_CENTER + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER)) * size
    thickness = (_BAND_THICKNESS + (0.5 - label) * effect
                 + rng.uniform(-_THICKNESS_JITTER, _THICKNESS_JITTER)) * size
    half = max(thickness, 0.0) / 2.0
    rows = np.arange(size, dtype=np.float64)
    profile = np.clip(0.5 + (half - np.abs(rows - center)), 0.0, 1.0)
    img = 0.08 + 0.75 * profile[:, None]
    img = img + rng.normal(0.0, noise, size=(size, size))
    return np.clip(img, 0.0, 1.0)[..., None]


_DISC_CENTER = (0.50, 0.30)   # (row, col) fraction
_DISC_RADIUS = 0.12
_VESSEL_WIDTH = 0.05
_VESSEL_CONTRAST = 0.30


def _render_fundus_image(size: int, label: int, effect: float, noise: float,
                         rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (_DISC_CENTER[0] + rng.uniform(-0.02, 0.02)) * size
    cx = (_DISC_CENTER[1] + rng.uniform(-0.02, 0.02)) * size
    img = np.empty((size, size, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.55, 0.28, 0.16
    disc = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) ** 2 / (_DISC_RADIUS * size) ** 4)
    img[..., 0] += 0.40 * disc
    img[..., 1] += 0.45 * disc
    img[..., 2] += 0.20 * disc

    # vessels: parabolic arcs leaving the disc; width and darkness carry the class
    width = max((_VESSEL_WIDTH + (0.5 - label) * effect / 2.0
                 + rng.uniform(-0.005, 0.005)) * size, 0.3)
    contrast = np.clip(_VESSEL_CONTRAST + (0.5 - label) * effect
                       + rng.uniform(-0.02, 0.02), 0.05, 0.9)
    t = np.linspace(0.0, 1.0, 60)
    for direction in (-1.0, 0.0, 1.0):
        bend = rng.uniform(0.2, 0.5) * direction + (0.15 if direction == 0 else 0.0)
        px = cx + t * 0.65 * size
        py = cy + direction * t * 0.35 * size + bend * (t ** 2) * size * 0.3
        dist2 = ((yy[..., None] - py) ** 2 + (xx[..., None] - px) ** 2).min(axis=-1)
        stroke = contrast * np.exp(-dist2 / (2.0 * width ** 2))
        img[..., 1] -= 0.8 * stroke
        img[..., 2] -= 0.5 * stroke
        img[..., 0] -= 0.3 * stroke
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthesize_dataset(kind: str, n_per_class: int, image_size: int,
                       effect_strength: float = 0.1, noise: float = 0.05,
                       seed: int = 0) -> Dataset:
    """Deterministic synthetic dataset with a known class signal.

    `oct_like` varies band thickness by `effect_strength` (fraction of
    image height) between classes; `fundus_like` varies vessel width and
    contrast. `effect_strength=0` makes the class distributions identical.
    """
    if kind not in ("oct_like", "fundus_like"):
        raise DataError(f"unknown synthetic kind {kind!r}")
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    if effect_strength < 0:
        raise DataError("effect_strength must be >= 0")
    rng = substream(seed, "synth", kind)
    render = _render_band_image if kind == "oct_like" else _render_fundus_image
    samples = []
    for i in range(n_per_class):
        for label in (LABEL_NEGATIVE, LABEL_POSITIVE):
            pixels = render(image_size, label, effect_strength, noise, rng)
            samples.append(ImageSample(pixels, label,
                                       source=f"synthetic:{kind}:seed{seed}:{i}",
                                       subject_id=f"synth-{label}-{i}"))
    return Dataset(samples)


# ---------------------------------------------------------------------------
# nested fold planning
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


@dataclass
class SplitPlan:
    """Fold assignments for nested cross-validation.

    `outer_tests[i]` partition all indices; for each outer fold the
    non-test indices split into `k2` inner folds, giving disjoint
    validation/train sets per (outer, inner) iteration.
    """

    n: int
    k1: int
    k2: int
    outer_tests: list[np.ndarray]
    inner_validations: list[list[np.ndarray]]

    def split(self, outer: int, inner: int) -> FoldSplit:
        test = self.outer_tests[outer]
        validation = self.inner_validations[outer][inner]
        rest = self.outer_train_val(outer)
        train = np.setdiff1d(rest, validation)
        return FoldSplit(train=train, validation=validation, test=test)

    def outer_train_val(self, outer: int) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n), self.outer_tests[outer])


def nested_folds(n: int, k1: int, k2: int, seed: int,
                 group_by_subject: bool = False, subjects=None) -> SplitPlan:
    """Shuffled nested fold plan; with grouping, all samples of a subject
    land in the same fold (outer and inner)."""
    if n < k1 * k2:
        raise DataError(f"need at least k1*k2={k1 * k2} samples, got {n}")
    rng = substream(seed, "folds", n, k1, k2)
    if group_by_subject:
        if subjects is None:
            raise DataError("group_by_subject requires subject ids")
        subjects = np.asarray(subjects)
        if subjects.shape[0] != n:
            raise DataError("subjects must align with sample count")
        unique = np.unique(subjects)
        if unique.size < k1:
            raise DataError(
                f"need at least k1={k1} distinct subjects, got {unique.size}")
        order = rng.permutation(unique)
        outer_subject_folds = np.array_split(order, k1)
        outer_tests, inner_validations = [], []
        for i in range(k1):
            test_mask = np.isin(subjects, outer_subject_folds[i])
            outer_tests.append(np.nonzero(test_mask)[0])
            rest_subjects = np.concatenate(
                [outer_subject_folds[j] for j in range(k1) if j != i])
            if rest_subjects.size < k2:
                raise DataError(
                    f"only {rest_subjects.size} subjects left for {k2} inner folds")
            inner_groups = np.array_split(rest_subjects, k2)
            inner_validations.append(
                [np.nonzero(np.isin(subjects, grp))[0] for grp in inner_groups])
        return SplitPlan(n, k1, k2, outer_tests, inner_validations)

    order = rng.permutation(n)
    outer_folds = np.array_split(order, k1)
    outer_tests, inner_validations = [], []
    for i in range(k1):
        outer_tests.append(np.sort(outer_folds[i]))
        rest = np.concatenate([outer_folds[j] for j in range(k1) if j != i])
        inner = [np.sort(chunk) for chunk in np.array_split(rest, k2)]
        inner_validations.append(inner)
    return SplitPlan(n, k1, k2, outer_tests, inner_validations)
