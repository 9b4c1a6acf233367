"""Volumetric Dice and surface Dice at a physical tolerance.

Boundaries are voxel-center sets: voxels of a class with at least one
face-adjacent neighbor outside the class (the volume border counts as
outside). Distances are Euclidean in millimetres using the voxel spacing,
computed with an exact distance transform.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError, UsageError

# float slack when comparing a distance to the tolerance
DIST_SLACK = 1e-9


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: tuple[float, ...]
    classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise UsageError(f"labels must be integers, got {self.labels.dtype}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.labels.ndim:
            raise ShapeError(f"spacing {self.spacing} does not match grid rank {self.labels.ndim}")
        if any(not math.isfinite(s) or s <= 0 for s in self.spacing):
            raise UsageError(f"spacing must be finite and positive, got {self.spacing}")
        if self.classes < 1:
            raise UsageError("classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.classes):
            raise UsageError(f"labels outside [0, {self.classes}]")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape


def _check_pair(pred: LabelVolume, gt: LabelVolume) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"grid mismatch: {pred.shape} vs {gt.shape}")
    if not np.allclose(pred.spacing, gt.spacing, rtol=0, atol=0):
        raise ShapeError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")


def dice(pred: LabelVolume, gt: LabelVolume, c: int) -> float:
    _check_pair(pred, gt)
    p = pred.labels == c
    g = gt.labels == c
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a face neighbor outside it."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def extract_surface(v: LabelVolume, c: int) -> set[tuple[int, ...]]:
    return {tuple(int(i) for i in idx) for idx in np.argwhere(surface_mask(v.labels == c))}


def _distance_to(surface: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    return ndimage.distance_transform_edt(~surface, sampling=spacing)


def surface_dice_masks(p: np.ndarray, g: np.ndarray, spacing: Sequence[float], tolerance_mm: float) -> float:
    if tolerance_mm < 0:
        raise UsageError("tolerance must be >= 0")
    sp = surface_mask(p)
    sg = surface_mask(g)
    n_p = int(sp.sum())
    n_g = int(sg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    limit = tolerance_mm + DIST_SLACK
    hits_p = int((_distance_to(sg, spacing)[sp] <= limit).sum())
    hits_g = int((_distance_to(sp, spacing)[sg] <= limit).sum())
    return (hits_p + hits_g) / (n_p + n_g)


def surface_dice(pred: LabelVolume, gt: LabelVolume, c: int, tolerance_mm: float = 1.0) -> float:
    _check_pair(pred, gt)
    return surface_dice_masks(pred.labels == c, gt.labels == c, pred.spacing, tolerance_mm)


@dataclass
class MetricResult:
    dsc: dict[int, float] = field(default_factory=dict)
    sdc: dict[int, float] = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(list(self.dsc.values())))

    @property
    def mean_sdc(self) -> float:
        return float(np.mean(list(self.sdc.values())))


def evaluate(pred: LabelVolume, gt: LabelVolume, tolerance_mm: float = 1.0) -> MetricResult:
    """Per-class DSC and SDC over foreground classes ``1..K``."""
    res = MetricResult()
    for c in range(1, gt.classes + 1):
        res.dsc[c] = dice(pred, gt, c)
        res.sdc[c] = surface_dice(pred, gt, c, tolerance_mm)
    return res


def aggregate_folds(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1); sd is NaN for one value."""
    vals = [float(v) for v in values]
    if not vals:
        raise UsageError("cannot aggregate an empty list")
    n = len(vals)
    mu = sum(vals) / n
    if n < 2:
        return mu, float("nan")
    return mu, math.sqrt(sum((v - mu) ** 2 for v in vals) / (n - 1))


# ---------------------------------------------------------------- binary label format
#
# little-endian:
#   magic   4s   b"TALV"
#   version u8   1
#   ndim    u8
#   dtype   u8   1=uint8 2=uint16 3=int32
#   classes u16
#   dims    ndim x u32
#   spacing ndim x f64
#   body    prod(dims) labels, row-major

_MAGIC = b"TALV"
_HEADER = struct.Struct("<4sBBBH")
_DTYPES = {1: np.dtype("<u1"), 2: np.dtype("<u2"), 3: np.dtype("<i4")}


def encode_label_volume(v: LabelVolume) -> bytes:
    top = int(v.labels.max()) if v.labels.size else 0
    code = 1 if top < 2**8 else 2 if top < 2**16 else 3
    dt = _DTYPES[code]
    head = _HEADER.pack(_MAGIC, 1, v.labels.ndim, code, v.classes)
    dims = struct.pack(f"<{v.labels.ndim}I", *v.labels.shape)
    spacing = struct.pack(f"<{v.labels.ndim}d", *v.spacing)
    return head + dims + spacing + np.ascontiguousarray(v.labels, dtype=dt).tobytes(order="C")


def decode_label_volume(buf: bytes) -> LabelVolume:
    if len(buf) < _HEADER.size:
        raise UsageError("label volume truncated in header")
    magic, version, ndim, code, classes = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC or version != 1 or code not in _DTYPES:
        raise UsageError("not a label volume (bad magic, version or dtype)")
    off = _HEADER.size
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    spacing = struct.unpack_from(f"<{ndim}d", buf, off)
    off += 8 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(dims))
    if len(buf) - off != count * dt.itemsize:
        raise UsageError(f"label body has {len(buf) - off} bytes, expected {count * dt.itemsize}")
    labels = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).astype(np.int64)
    return LabelVolume(labels, spacing, classes)


def write_label_volume(path: str | Path, v: LabelVolume) -> None:
    Path(path).write_bytes(encode_label_volume(v))


def read_label_volume(path: str | Path) -> LabelVolume:
    return decode_label_volume(Path(path).read_bytes())
