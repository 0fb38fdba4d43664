"""Synthetic phantom volumes, training-time augmentation and k-fold splits.

Augmentations work on plain ``(image, labels)`` numpy arrays of equal shape
and always apply the same geometric transform to both.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .volume import LabelMask, VoxelGrid, normalize_intensity, resample_array

MIN_PHANTOM_DIM = 16


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 3
    noise_sigma: float = 0.1
    bias_amplitude: float = 0.2
    seed: int = 0
    spacing: float = 2.0
    distractors: int = 2

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one foreground class")
        if min(self.dims) < MIN_PHANTOM_DIM:
            raise ValueError(f"phantom dims must be >= {MIN_PHANTOM_DIM} per axis, got {self.dims}")
        if self.noise_sigma < 0 or self.bias_amplitude < 0:
            raise ValueError("noise and bias amplitudes must be non-negative")


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid(coords: np.ndarray, center, radii, rot) -> np.ndarray:
    local = np.einsum("ij,j...->i...", rot.T, coords - np.asarray(center).reshape(3, 1, 1, 1))
    return sum((local[i] / radii[i]) ** 2 for i in range(3)) <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[VoxelGrid, LabelMask]:
    """Nested, jittered ellipsoids with a smooth bias field and Gaussian noise.

    Class 1 is the outer body; classes 2..C are smaller chambers placed
    side by side inside it, and later classes overwrite earlier ones. A few
    unlabeled blobs with class-like intensity are scattered in the background
    so that intensity alone does not determine the label.
    """
    rng = np.random.default_rng(spec.seed)
    dims = np.asarray(spec.dims, dtype=np.float64)
    coords = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in spec.dims), indexing="ij"))
    labels = np.zeros(spec.dims, dtype=np.uint8)
    center = dims / 2.0 - 0.5 + rng.uniform(-0.06, 0.06, 3) * dims
    outer = dims * rng.uniform(0.26, 0.34, 3)
    rot = _rotation(rng)

    levels = np.linspace(0.45, 1.0, spec.num_classes) + rng.uniform(-0.06, 0.06, spec.num_classes)
    levels = np.concatenate([[0.0], levels])
    if spec.num_classes >= 3:
        # keep the outer body darker than the inner structures but not monotone
        levels[1:] = levels[1:][np.r_[1, 0, 2:spec.num_classes]]

    image = np.zeros(spec.dims, dtype=np.float64)
    for _ in range(spec.distractors):
        blob_center = rng.uniform(0.1, 0.9, 3) * dims
        blob_radii = dims * rng.uniform(0.05, 0.09, 3)
        blob = _ellipsoid(coords, blob_center, blob_radii, _rotation(rng))
        image[blob] = levels[rng.integers(1, spec.num_classes + 1)]

    labels[_ellipsoid(coords, center, outer, rot)] = 1
    inner = spec.num_classes - 1
    for c in range(2, spec.num_classes + 1):
        angle = 2.0 * np.pi * (c - 2) / max(inner, 1) + rng.uniform(-0.3, 0.3)
        direction = np.array([np.cos(angle), np.sin(angle), rng.uniform(-0.3, 0.3)])
        radii = outer * rng.uniform(0.42, 0.58, 3)
        offset = direction * (outer - radii) * (0.6 if inner > 1 else 0.2)
        labels[_ellipsoid(coords, center + rot @ offset, radii, rot)] = c

    counts = np.bincount(labels.ravel(), minlength=spec.num_classes + 1)
    if np.any(counts[1:] == 0):
        raise ValueError(f"dims {spec.dims} are too small to place {spec.num_classes} structures")

    fg = labels > 0
    image[fg] = levels[labels[fg]]
    if spec.bias_amplitude > 0:
        unit = coords / (dims.reshape(3, 1, 1, 1) - 1) * 2.0 - 1.0
        a = rng.normal(size=3)
        b = rng.normal(size=3)
        field_ = sum(a[i] * unit[i] + 0.5 * b[i] * unit[i] ** 2 for i in range(3))
        field_ /= max(np.abs(field_).max(), 1e-12)
        image = image * (1.0 + spec.bias_amplitude * field_) + 0.5 * spec.bias_amplitude * field_
    if spec.noise_sigma > 0:
        image = image + rng.normal(scale=spec.noise_sigma, size=spec.dims)

    sp = (spec.spacing,) * 3
    return normalize_intensity(VoxelGrid(image.astype(np.float32), sp)), LabelMask(labels, spec.num_classes, sp)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    patch_3d: tuple[int, int, int] = (24, 24, 24)
    patch_2d: tuple[int, int] = (24, 24)
    flip_axes: tuple[int, ...] = (0, 1, 2)
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi < 2.0:
            raise ValueError(f"scale range must lie inside (0, 2), got {self.scale_range}")
        if min(self.patch_3d) < 1 or min(self.patch_2d) < 1:
            raise ValueError("patch dims must be positive")


def pad_to(arr: np.ndarray, dims, value=0) -> np.ndarray:
    """Zero-pad symmetrically (extra voxel after) up to at least ``dims``."""
    pads = []
    for n, p in zip(arr.shape, dims):
        extra = max(0, p - n)
        pads.append((extra // 2, extra - extra // 2))
    if not any(a or b for a, b in pads):
        return arr
    return np.pad(arr, pads, mode="constant", constant_values=value)


def crop_at(arr: np.ndarray, offset, dims) -> np.ndarray:
    return arr[tuple(slice(o, o + p) for o, p in zip(offset, dims))]


def random_crop(image: np.ndarray, gt: np.ndarray, patch_dims, rng: np.random.Generator):
    """Crop both arrays at a uniformly drawn offset, padding small volumes first."""
    if image.shape != gt.shape:
        raise ValueError(f"image {image.shape} and gt {gt.shape} differ")
    patch_dims = tuple(int(p) for p in patch_dims)
    if len(patch_dims) != image.ndim or min(patch_dims) < 1:
        raise ValueError(f"bad patch dims {patch_dims} for a {image.ndim}D volume")
    image = pad_to(image, patch_dims)
    gt = pad_to(gt, patch_dims)
    offset = [int(rng.integers(0, n - p + 1)) for n, p in zip(image.shape, patch_dims)]
    return crop_at(image, offset, patch_dims), crop_at(gt, offset, patch_dims)


def random_flip(image: np.ndarray, gt: np.ndarray, rng: np.random.Generator, axes=None, prob: float = 0.5):
    axes = range(image.ndim) if axes is None else axes
    for axis in axes:
        if rng.random() < prob:
            image = np.flip(image, axis)
            gt = np.flip(gt, axis)
    return np.ascontiguousarray(image), np.ascontiguousarray(gt)


def center_fit(arr: np.ndarray, dims) -> np.ndarray:
    """Centre-crop or zero-pad ``arr`` to exactly ``dims``."""
    arr = pad_to(arr, dims)
    offset = [(n - p) // 2 for n, p in zip(arr.shape, dims)]
    return crop_at(arr, offset, dims)


def scale_pair(image: np.ndarray, gt: np.ndarray, factor: float):
    dims = image.shape
    new = tuple(max(1, int(round(n * factor))) for n in dims)
    if new == dims:
        return image.copy(), gt.copy()
    img = resample_array(image, new, "trilinear").astype(np.float32)
    lab = resample_array(gt, new, "nearest")
    return center_fit(img, dims), center_fit(lab, dims)


def random_scale(image: np.ndarray, gt: np.ndarray, rng: np.random.Generator, scale_range=(0.9, 1.1)):
    """Rescale both volumes by a random factor, then crop/pad back to the original dims."""
    factor = float(rng.uniform(*scale_range))
    return scale_pair(image, gt, factor)


def augment(image: np.ndarray, gt: np.ndarray, config: AugmentConfig, rng: np.random.Generator, patch):
    image, gt = random_scale(image, gt, rng, config.scale_range)
    image, gt = random_flip(image, gt, rng, config.flip_axes, config.flip_prob)
    return random_crop(image, gt, patch, rng)


# ---------------------------------------------------------------------------
# cross-validation splits


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...] = field(default=())


def kfold_split(ids, k: int, seed: int) -> list[FoldSplit]:
    """Shuffle ``ids`` and split into ``k`` near-equal test folds."""
    ids = list(ids)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} ids")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    parts = np.array_split(order, k)
    folds = []
    for f, part in enumerate(parts):
        test = set(int(i) for i in part)
        folds.append(FoldSplit(
            fold=f,
            train_ids=tuple(ids[i] for i in range(len(ids)) if i not in test),
            test_ids=tuple(ids[i] for i in sorted(test)),
        ))
    return folds


# ---------------------------------------------------------------------------
# dataset manifest

MANIFEST_HEADER = "scan_id\timage\tgt"


def write_dataset_manifest(path, entries) -> None:
    """Write ``(scan_id, image_path, gt_path)`` rows; paths are stored relative to the manifest."""
    base = Path(path).resolve().parent
    lines = [MANIFEST_HEADER]
    for scan_id, image, gt in entries:
        if "\t" in scan_id or "\n" in scan_id:
            raise ValueError(f"bad scan id {scan_id!r}")
        rel = [os.path.relpath(Path(p).resolve(), base) for p in (image, gt)]
        lines.append("\t".join([scan_id] + rel))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset_manifest(path) -> list[tuple[str, str, str]]:
    """Rows of ``(scan_id, image_path, gt_path)`` with paths resolved against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such manifest: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed row {ln!r}")
        scan_id, image, gt = parts
        rows.append((scan_id, str(path.parent / image), str(path.parent / gt)))
    ids = [r[0] for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate scan ids")
    return rows


def phantom_dataset(n: int, spec: PhantomSpec = PhantomSpec()) -> list[tuple[str, VoxelGrid, LabelMask]]:
    """``n`` phantoms with seeds ``spec.seed, spec.seed + 1, ...``."""
    if n < 1:
        raise ValueError("need at least one phantom")
    width = max(2, len(str(n - 1)))
    return [(f"phantom_{i:0{width}d}",) + generate_phantom(replace(spec, seed=spec.seed + i)) for i in range(n)]
