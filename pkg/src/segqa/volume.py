"""Volume containers, the vvol file format, and the preprocessing chain.

Arrays are stored with shape ``(d, h, w)`` in C order, so the last axis
(``w``, "x") varies fastest in memory and on disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch

MAGIC = "VVOL1"
DEFAULT_ROI_MARGIN = 8


class VolumeFormatError(ValueError):
    """Raised when a vvol file or an in-memory volume violates the format."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise VolumeFormatError(f"spacing needs 3 components, got {spacing}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise VolumeFormatError(f"spacing must be strictly positive, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D float32 scalar field with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeFormatError(f"expected a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("grid contains NaN or Inf")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Integer label volume with values in ``{0..num_classes}``; 0 is background."""

    labels: np.ndarray
    num_classes: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise VolumeFormatError(f"expected a non-empty 3D array, got shape {raw.shape}")
        if int(self.num_classes) < 1 or int(self.num_classes) > 255:
            raise VolumeFormatError(f"num_classes must be in [1, 255], got {self.num_classes}")
        if raw.size and (raw.min() < 0 or raw.max() > self.num_classes):
            raise VolumeFormatError(
                f"label values must lie in [0, {self.num_classes}], "
                f"found range [{raw.min()}, {raw.max()}]"
            )
        object.__setattr__(self, "labels", _freeze(raw.astype(np.uint8)))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, ``lo`` inclusive and ``hi`` exclusive, per axis."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ValueError("bounding box needs three axes")
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"empty bounding box {self.lo} -> {self.hi}")
        if any(a < 0 for a in self.lo):
            raise ValueError(f"negative box origin {self.lo}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def fits(self, dims: Sequence[int]) -> bool:
        return all(b <= n for b, n in zip(self.hi, dims))


Grid = Union[VoxelGrid, LabelMask]


def _array(grid: Grid) -> np.ndarray:
    return grid.labels if isinstance(grid, LabelMask) else grid.data


def _like(grid: Grid, arr: np.ndarray, spacing=None) -> Grid:
    spacing = grid.spacing if spacing is None else spacing
    if isinstance(grid, LabelMask):
        return LabelMask(arr, grid.num_classes, spacing)
    return VoxelGrid(arr, spacing)


# ---------------------------------------------------------------------------
# vvol IO


def save_grid(grid: Grid, path) -> None:
    """Write ``grid`` as a vvol file (text header line + little-endian payload)."""
    if isinstance(grid, LabelMask):
        kind, payload, c = "u8", grid.labels.astype("<u1"), grid.num_classes
    elif isinstance(grid, VoxelGrid):
        if not np.all(np.isfinite(grid.data)):
            raise VolumeFormatError("refusing to write non-finite values")
        kind, payload, c = "f32", grid.data.astype("<f4"), 0
    else:
        raise TypeError(f"cannot save {type(grid).__name__}")
    d, h, w = grid.dims
    sx, sy, sz = grid.spacing
    header = f"{MAGIC} {kind} {d} {h} {w} {sx!r} {sy!r} {sz!r} {c}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(payload).tobytes(order="C"))


def load_grid(path) -> Grid:
    """Read a vvol file written by :func:`save_grid`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such volume file: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError(f"{path}: missing header line")
    fields = raw[:nl].decode("utf-8", errors="replace").split()
    if len(fields) != 9 or fields[0] != MAGIC:
        raise VolumeFormatError(f"{path}: malformed header {raw[:nl]!r}")
    kind = fields[1]
    try:
        d, h, w = (int(v) for v in fields[2:5])
        spacing = tuple(float(v) for v in fields[5:8])
        c = int(fields[8])
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: malformed header field ({exc})") from None
    if min(d, h, w) < 1:
        raise VolumeFormatError(f"{path}: non-positive dims {(d, h, w)}")
    dtype = {"f32": np.dtype("<f4"), "u8": np.dtype("<u1")}.get(kind)
    if dtype is None:
        raise VolumeFormatError(f"{path}: unknown kind {kind!r}")
    payload = raw[nl + 1:]
    expected = d * h * w * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(d, h, w)
    if kind == "u8":
        if c < 1:
            raise VolumeFormatError(f"{path}: u8 volume must declare C > 0")
        if arr.max() > c:
            raise VolumeFormatError(f"{path}: label value {arr.max()} exceeds declared C={c}")
        return LabelMask(arr, c, spacing)
    return VoxelGrid(arr.astype(np.float32), spacing)


# ---------------------------------------------------------------------------
# preprocessing


def _linear_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - frac) + np.take(arr, hi, axis=axis) * frac


def sample_coordinates(n_out: int, ratio: float) -> np.ndarray:
    """Source coordinates of output voxel centres for a resize by ``1/ratio``.

    Voxel centres are aligned: output voxel ``i`` covers source position
    ``(i + 0.5) * ratio - 0.5``.
    """
    return (np.arange(n_out, dtype=np.float64) + 0.5) * ratio - 0.5


def resample_array(arr: np.ndarray, out_dims: Sequence[int], mode: str) -> np.ndarray:
    """Resize a 3D array to ``out_dims`` with centre-aligned sampling.

    ``mode="trilinear"`` interpolates separably along each axis with edge
    clamping; ``mode="nearest"`` picks the source voxel containing each
    output centre.
    """
    out = arr
    for axis, n_out in enumerate(out_dims):
        ratio = arr.shape[axis] / n_out
        coords = sample_coordinates(int(n_out), ratio)
        if mode == "nearest":
            idx = np.clip(np.floor(coords + 0.5), 0, arr.shape[axis] - 1).astype(np.int64)
            out = np.take(out, idx, axis=axis)
        elif mode == "trilinear":
            out = _linear_axis(out.astype(np.float64), coords, axis)
        else:
            raise ValueError(f"unknown interpolation mode {mode!r}")
    return out


def resample_isotropic(grid: Grid, target_spacing: float, mode: str = "trilinear") -> Grid:
    """Resample to an isotropic spacing of ``target_spacing`` mm."""
    if not target_spacing > 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if isinstance(grid, LabelMask) and mode != "nearest":
        raise ValueError("label masks can only be resampled with mode='nearest'")
    out_dims = tuple(
        max(1, int(round(n * s / target_spacing))) for n, s in zip(grid.dims, grid.spacing)
    )
    t = float(target_spacing)
    if out_dims == grid.dims and grid.spacing == (t, t, t) and mode == "nearest":
        return _like(grid, _array(grid).copy(), (t, t, t))
    arr = resample_array(_array(grid), out_dims, mode)
    if isinstance(grid, VoxelGrid):
        arr = arr.astype(np.float32)
    return _like(grid, arr, (t, t, t))


def normalize_intensity(grid: VoxelGrid) -> VoxelGrid:
    """Min-max map intensities to ``[-1, 1]``; a constant grid maps to zeros."""
    x = grid.data.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return VoxelGrid(np.zeros_like(grid.data), grid.spacing)
    out = 2.0 * (x - lo) / (hi - lo) - 1.0
    return VoxelGrid(np.clip(out, -1.0, 1.0).astype(np.float32), grid.spacing)


def roi_from_mask(gt: LabelMask, margin: int = DEFAULT_ROI_MARGIN) -> BoundingBox:
    """Foreground bounding box of ``gt`` grown by ``margin`` voxels and clamped."""
    fg = gt.labels > 0
    if not fg.any():
        raise ValueError("mask has no foreground voxels")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(fg.any(axis=other))
        lo.append(max(0, int(idx[0]) - margin))
        hi.append(min(gt.dims[axis], int(idx[-1]) + 1 + margin))
    return BoundingBox(tuple(lo), tuple(hi))


def crop(grid: Grid, box: BoundingBox) -> Grid:
    """Copy the sub-block ``box`` out of ``grid``; spacing is unchanged."""
    if not box.fits(grid.dims):
        raise ValueError(f"box {box} exceeds grid dims {grid.dims}")
    return _like(grid, _array(grid)[box.slices].copy())


def one_hot(mask: LabelMask, dtype=torch.float32) -> torch.Tensor:
    """One-hot encode to a ``(C+1, d, h, w)`` tensor."""
    labels = torch.from_numpy(mask.labels.astype(np.int64))
    return one_hot_labels(labels, mask.num_classes + 1, channel_dim=0, dtype=dtype)


def one_hot_labels(
    labels: torch.Tensor, num_channels: int, channel_dim: int = 1, dtype=torch.float32
) -> torch.Tensor:
    """One-hot encode an integer tensor, inserting the class axis at ``channel_dim``."""
    out = torch.nn.functional.one_hot(labels.long(), num_channels).to(dtype)
    return out.movedim(-1, channel_dim)


def preprocess(
    image: VoxelGrid,
    gt: LabelMask,
    target_spacing: float = 2.0,
    margin: int = DEFAULT_ROI_MARGIN,
) -> tuple[VoxelGrid, LabelMask]:
    """Resample to isotropic spacing, normalise to [-1, 1], then crop the ROI."""
    if image.dims != gt.dims:
        raise ValueError(f"image dims {image.dims} differ from gt dims {gt.dims}")
    image = normalize_intensity(resample_isotropic(image, target_spacing, "trilinear"))
    gt = resample_isotropic(gt, target_spacing, "nearest")
    box = roi_from_mask(gt, margin)
    return crop(image, box), crop(gt, box)
