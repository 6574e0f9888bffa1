"""Dataset ingestion, the image preprocessing pipeline and the stress-scenario
constructors (out-of-distribution transforms, dynamic streams, per-class
subsampling, synthetic shifted domains).

All randomness is drawn from generators seeded by explicit (seed, index)
pairs so that every sample's augmentation is reproducible in isolation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DegenerateInputError, ShapeError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

OOD_KINDS = ("random-flip", "random-invert", "gaussian-blur", "random-erasing")

# sigma for a k=3 gaussian blur via the usual 0.3*((k-1)/2 - 1) + 0.8 rule
GAUSSIAN_BLUR_SIGMA = 0.8
RANDOM_ERASING_SCALE = (0.02, 0.33)
RANDOM_ERASING_RATIO = (0.3, 3.3)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class DatasetManifest:
    root: str
    entries: list  # [(relative path, class id)]
    class_names: list

    def __len__(self):
        return len(self.entries)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.class_names), dtype=np.int64)
        for _, cid in self.entries:
            counts[cid] += 1
        return counts


def load_image_folder(root) -> DatasetManifest:
    """Build a manifest from a root/class_name/*.img layout.

    Class directories map to ids in lexicographic order; unreadable image
    files are skipped with a logged count.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigError(f"dataset root {root} has no class directories")
    class_names = [d.name for d in class_dirs]
    entries = []
    skipped = 0
    for cid, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(f) as img:
                    img.verify()
            except Exception:
                skipped += 1
                continue
            entries.append((str(f.relative_to(root)), cid))
    if skipped:
        logger.warning("load_image_folder: skipped %d unreadable image file(s) under %s",
                       skipped, root)
    if not entries:
        raise ConfigError(f"dataset root {root} holds no readable images")
    return DatasetManifest(root=str(root), entries=entries, class_names=class_names)


def subsample_per_class(manifest: DatasetManifest, k: int, seed: int) -> DatasetManifest:
    """Uniform per-class subsample of min(k, class size) entries, no replacement."""
    if k < 1:
        raise ConfigError(f"subsample size must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for idx, (_, cid) in enumerate(manifest.entries):
        by_class.setdefault(cid, []).append(idx)
    keep = []
    for cid in sorted(by_class):
        positions = by_class[cid]
        if len(positions) < k:
            logger.warning("subsample_per_class: class %s has only %d entries (< %d), keeping all",
                           manifest.class_names[cid], len(positions), k)
            keep.extend(positions)
        else:
            chosen = rng.choice(len(positions), size=k, replace=False)
            keep.extend(positions[i] for i in sorted(chosen))
    keep.sort()
    return DatasetManifest(
        root=manifest.root,
        entries=[manifest.entries[i] for i in keep],
        class_names=list(manifest.class_names),
    )


# ---------------------------------------------------------------------------
# preprocessing

@dataclass
class PreprocessSpec:
    resize_to: int = 256
    crop: int = 224
    hflip_prob: float = 0.5
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ConfigError("preprocess.std: all channel stds must be > 0")
        if self.crop > self.resize_to:
            raise ConfigError("preprocess.crop: crop size exceeds resize size")


IMAGENET_STATS = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


def _to_rgb_array(image) -> np.ndarray:
    """Accept a PIL image or (h, w, 3) array; return float32 array in [0, 1]."""
    if isinstance(image, Image.Image):
        arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    else:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected an (h, w, 3) image, got shape {arr.shape}")
        if arr.max() > 1.5:  # uint8-range input
            arr = arr / 255.0
    return arr


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(np.clip(arr * 255.0, 0, 255).astype(np.uint8))
    img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _crop_and_flip(arr: np.ndarray, spec: PreprocessSpec, mode: str, seed: int,
                   index: int) -> np.ndarray:
    margin = spec.resize_to - spec.crop
    if mode == "train":
        rng = np.random.default_rng([seed, index])
        top = int(rng.integers(0, margin + 1))
        left = int(rng.integers(0, margin + 1))
        arr = arr[top:top + spec.crop, left:left + spec.crop]
        if spec.hflip_prob > 0 and rng.random() < spec.hflip_prob:
            arr = arr[:, ::-1]
    else:
        off = margin // 2
        arr = arr[off:off + spec.crop, off:off + spec.crop]
    return arr


def preprocess(image, spec: PreprocessSpec, mode: str, seed: int, index: int = 0) -> np.ndarray:
    """Resize -> crop -> (train-only random flip) -> z-score normalize.

    Train mode uses a random crop and horizontal flip drawn from a generator
    keyed on (seed, index), so reruns are bit-identical per sample; eval mode
    center-crops and is fully deterministic.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"preprocess mode must be 'train' or 'eval', got {mode!r}")
    arr = _resize(_to_rgb_array(image), spec.resize_to)
    arr = _crop_and_flip(arr, spec, mode, seed, index)
    return normalize_image(arr, spec)


def normalize_image(arr: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    return ((arr - mean) / std).astype(np.float32)


def compute_channel_stats(manifest: DatasetManifest, resize_to: int = 256,
                          max_images: int = 256) -> tuple:
    """Per-channel mean/std over (up to) the first max_images training images,
    computed once and frozen into the run config."""
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for rel, _ in manifest.entries[:max_images]:
        with Image.open(Path(manifest.root) / rel) as img:
            arr = _resize(_to_rgb_array(img), resize_to)
        total += arr.reshape(-1, 3).sum(axis=0)
        total_sq += (arr.reshape(-1, 3) ** 2).sum(axis=0)
        count += arr.shape[0] * arr.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 1e-12)
    return tuple(float(m) for m in mean), tuple(float(s) for s in np.sqrt(var))


# ---------------------------------------------------------------------------
# out-of-distribution transforms

@dataclass(frozen=True)
class OODTransform:
    """Exactly one corruption applied to every evaluation sample."""

    kind: str

    def __post_init__(self):
        if self.kind not in OOD_KINDS:
            raise ConfigError(
                f"ood transform must be one of {OOD_KINDS}, got {self.kind!r}"
            )


def make_ood_transform(kind) -> OODTransform:
    if isinstance(kind, (list, tuple, set)):
        raise ConfigError("ood transform: exactly one kind per run, got several")
    return OODTransform(str(kind))


def _gaussian_blur3(arr: np.ndarray, sigma: float = GAUSSIAN_BLUR_SIGMA) -> np.ndarray:
    offsets = np.array([-1.0, 0.0, 1.0])
    k = np.exp(-offsets ** 2 / (2.0 * sigma * sigma))
    k /= k.sum()
    padded = np.pad(arr, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    rows = k[0] * padded[:-2] + k[1] * padded[1:-1] + k[2] * padded[2:]
    cols = k[0] * rows[:, :-2] + k[1] * rows[:, 1:-1] + k[2] * rows[:, 2:]
    return cols.astype(np.float32)


def ood_transform_image(arr: np.ndarray, transform: OODTransform, seed: int,
                        index: int = 0) -> np.ndarray:
    """Apply one corruption to an un-normalized [0, 1] image array."""
    if transform.kind == "random-flip":
        return arr[:, ::-1].copy()
    if transform.kind == "random-invert":
        return (1.0 - arr).astype(np.float32)
    if transform.kind == "gaussian-blur":
        return _gaussian_blur3(arr)
    # random erasing: area and aspect drawn per sample, rectangle filled with 0
    rng = np.random.default_rng([seed, index, 0x0E2A])
    h, w = arr.shape[:2]
    out = arr.copy()
    for _ in range(10):
        target_area = rng.uniform(*RANDOM_ERASING_SCALE) * h * w
        log_ratio = rng.uniform(math.log(RANDOM_ERASING_RATIO[0]),
                                math.log(RANDOM_ERASING_RATIO[1]))
        ratio = math.exp(log_ratio)
        eh = int(round(math.sqrt(target_area * ratio)))
        ew = int(round(math.sqrt(target_area / ratio)))
        if 0 < eh <= h and 0 < ew <= w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out[top:top + eh, left:left + ew, :] = 0.0
            break
    return out


# ---------------------------------------------------------------------------
# dynamic streams

@dataclass
class StreamPlan:
    """Random partition of sample indices into K nearly equal parts."""

    num_parts: int
    assignment: np.ndarray  # sample index -> part id

    def part_indices(self, part: int) -> np.ndarray:
        if not 0 <= part < self.num_parts:
            raise ConfigError(f"stream part {part} out of range [0, {self.num_parts})")
        return np.flatnonzero(self.assignment == part)


def split_stream(n: int, num_parts: int, seed: int) -> StreamPlan:
    """Partition n indices into num_parts parts with sizes differing by <= 1."""
    if num_parts < 1:
        raise ConfigError(f"stream parts must be >= 1, got {num_parts}")
    if num_parts > n:
        raise ConfigError(f"stream parts ({num_parts}) exceed dataset size ({n})")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    base, extra = divmod(n, num_parts)
    start = 0
    for part in range(num_parts):
        size = base + (1 if part < extra else 0)
        assignment[perm[start:start + size]] = part
        start += size
    return StreamPlan(num_parts=num_parts, assignment=assignment)


# ---------------------------------------------------------------------------
# synthetic shifted domains

@dataclass
class SyntheticShiftSpec:
    """Gaussian-blob source domain plus a rigidly transformed target copy.

    The target points are the source sample pushed through rotation /
    translation / scaling with additive noise, so a zero transform with zero
    noise reproduces the source point set exactly.

    Blob shape: isotropic ``cluster_std`` by default; ``radial_std`` /
    ``tangential_std`` stretch each blob along / across its center direction
    (elongated blobs make the label boundary genuinely rotation-sensitive);
    ``cluster_cov`` overrides everything with an explicit shared 2x2
    covariance.
    """

    classes: int = 3
    samples_per_class: int = 300
    centers: list | None = None        # default: circle of radius `radius`
    radius: float = 2.0
    cluster_std: float = 0.6
    radial_std: float | None = None
    tangential_std: float | None = None
    cluster_cov: list | None = None    # explicit 2x2 covariance
    rotation_deg: float = 45.0
    translation: tuple = (0.0, 0.0)
    scale: float = 1.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("synthetic.classes: need at least 2 classes")
        if self.samples_per_class < 1:
            raise ConfigError("synthetic.samples_per_class: must be >= 1")
        if self.cluster_std <= 0:
            raise DegenerateInputError("synthetic.cluster_std: must be > 0")
        if (self.radial_std is None) != (self.tangential_std is None):
            raise ConfigError("synthetic: radial_std and tangential_std come as a pair")
        if self.radial_std is not None and (self.radial_std <= 0 or self.tangential_std <= 0):
            raise DegenerateInputError("synthetic: anisotropic stds must be > 0")
        if self.scale <= 0:
            raise ConfigError("synthetic.scale: must be > 0")


@dataclass
class ArrayDataset:
    """In-memory labeled feature set; the common currency of the toy scenarios."""

    x: np.ndarray  # (n, d) float32
    y: np.ndarray  # (n,) int64
    class_names: list = field(default_factory=list)

    def __len__(self):
        return self.x.shape[0]

    def subset(self, indices) -> "ArrayDataset":
        indices = np.asarray(indices)
        return ArrayDataset(self.x[indices], self.y[indices], self.class_names)


def _cluster_transform(spec: SyntheticShiftSpec, center: np.ndarray) -> np.ndarray:
    """Matrix A such that A @ standard_normal has the blob covariance."""
    if spec.cluster_cov is not None:
        cov = np.asarray(spec.cluster_cov, dtype=np.float64)
        if cov.shape != (2, 2):
            raise ConfigError(f"synthetic.cluster_cov: expected a 2x2 matrix, got {cov.shape}")
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise DegenerateInputError("synthetic.cluster_cov: not positive definite") from exc
    if spec.radial_std is not None:
        norm = np.linalg.norm(center)
        if norm == 0:
            raise DegenerateInputError("synthetic: anisotropic blob centered at the origin")
        radial = center / norm
        tangential = np.array([-radial[1], radial[0]])
        return np.column_stack([spec.radial_std * radial, spec.tangential_std * tangential])
    return spec.cluster_std * np.eye(2)


def gen_synthetic_domains(spec: SyntheticShiftSpec) -> tuple[ArrayDataset, ArrayDataset]:
    rng = np.random.default_rng(spec.seed)
    if spec.centers is not None:
        centers = np.asarray(spec.centers, dtype=np.float64)
        if centers.shape != (spec.classes, 2):
            raise ConfigError(
                f"synthetic.centers: expected shape ({spec.classes}, 2), got {centers.shape}"
            )
    else:
        angles = np.deg2rad(90.0 + 360.0 * np.arange(spec.classes) / spec.classes)
        centers = spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    xs, ys = [], []
    for cid in range(spec.classes):
        shape = _cluster_transform(spec, centers[cid])
        pts = centers[cid] + rng.standard_normal((spec.samples_per_class, 2)) @ shape.T
        xs.append(pts)
        ys.append(np.full(spec.samples_per_class, cid, dtype=np.int64))
    source_x = np.concatenate(xs, axis=0)
    source_y = np.concatenate(ys, axis=0)

    theta = np.deg2rad(spec.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    target_x = spec.scale * (source_x @ rot.T) + np.asarray(spec.translation, dtype=np.float64)
    if spec.noise > 0:
        target_x = target_x + spec.noise * rng.standard_normal(target_x.shape)

    names = [f"class_{c}" for c in range(spec.classes)]
    return (
        ArrayDataset(source_x.astype(np.float32), source_y.copy(), names),
        ArrayDataset(target_x.astype(np.float32), source_y.copy(), names),
    )


def subsample_array_per_class(dataset: ArrayDataset, k: int, seed: int) -> ArrayDataset:
    """ArrayDataset counterpart of :func:`subsample_per_class`."""
    if k < 1:
        raise ConfigError(f"subsample size must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    keep = []
    for cid in np.unique(dataset.y):
        positions = np.flatnonzero(dataset.y == cid)
        if len(positions) < k:
            logger.warning("subsample: class %d has only %d entries (< %d), keeping all",
                           int(cid), len(positions), k)
            keep.extend(positions)
        else:
            chosen = rng.choice(len(positions), size=k, replace=False)
            keep.extend(positions[sorted(chosen)])
    keep = np.sort(np.asarray(keep))
    return dataset.subset(keep)


# ---------------------------------------------------------------------------
# image-backed dataset and batch streams

class ImageDataset:
    """Manifest-backed dataset applying the preprocessing pipeline per item."""

    def __init__(self, manifest: DatasetManifest, spec: PreprocessSpec, mode: str,
                 seed: int, ood: OODTransform | None = None):
        if ood is not None and mode != "eval":
            raise ConfigError("ood transforms apply to evaluation data only")
        self.manifest = manifest
        self.spec = spec
        self.mode = mode
        self.seed = seed
        self.ood = ood
        self.class_names = list(manifest.class_names)

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, index: int):
        rel, cid = self.manifest.entries[index]
        with Image.open(Path(self.manifest.root) / rel) as img:
            arr = _resize(_to_rgb_array(img), self.spec.resize_to)
        arr = _crop_and_flip(arr, self.spec, self.mode, self.seed, index)
        # corruption slots in after the crop, before normalization
        if self.ood is not None:
            arr = ood_transform_image(arr, self.ood, self.seed, index)
        arr = normalize_image(arr, self.spec)
        return arr.transpose(2, 0, 1).copy(), int(cid)  # CHW for the conv backbones


class BatchStream:
    """Infinite cycling batch iterator with seed-deterministic reshuffling.

    Every call to :meth:`next_batch` yields exactly ``batch_size`` samples;
    when a pass over the data ends, a fresh permutation is drawn from the
    stream's own generator, so the sequence of batches is a pure function of
    (dataset, batch_size, seed).
    """

    def __init__(self, dataset, batch_size: int, seed: int):
        if len(dataset) == 0:
            raise DegenerateInputError("cannot stream batches from an empty dataset")
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self._order = self._rng.permutation(len(dataset))
        self._cursor = 0
        self.samples_drawn = 0

    def _next_index(self) -> int:
        if self._cursor >= len(self._order):
            self._order = self._rng.permutation(len(self.dataset))
            self._cursor = 0
        idx = int(self._order[self._cursor])
        self._cursor += 1
        return idx

    def next_batch(self):
        import torch

        xs, ys = [], []
        for _ in range(self.batch_size):
            x, y = _fetch(self.dataset, self._next_index())
            xs.append(x)
            ys.append(y)
        self.samples_drawn += self.batch_size
        return (torch.from_numpy(np.stack(xs).astype(np.float32)),
                torch.from_numpy(np.asarray(ys, dtype=np.int64)))


def _fetch(dataset, index: int):
    if isinstance(dataset, ArrayDataset):
        return dataset.x[index], int(dataset.y[index])
    return dataset[index]


def eval_batches(dataset, batch_size: int = 256):
    """Deterministic in-order batches over a dataset (for evaluation)."""
    import torch

    n = len(dataset)
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        pairs = [_fetch(dataset, i) for i in idx]
        xs = np.stack([p[0] for p in pairs]).astype(np.float32)
        ys = np.asarray([p[1] for p in pairs], dtype=np.int64)
        yield torch.from_numpy(xs), torch.from_numpy(ys)
