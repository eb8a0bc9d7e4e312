"""Shared vocabulary: tiles, masks, predictions and domain tags.

Rasters are numpy arrays. Tiles store pixels as H x W x 3 floats in [0, 1];
predictions and one-hot encodings are K x H x W. Every container here is a
frozen dataclass and is treated as immutable once built.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

IGNORE = 255
MIN_TILE_PX = 8


class Location(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"


@dataclass(frozen=True)
class Tile:
    pixels: np.ndarray
    gsd_m: float
    location: Location
    id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1))


@dataclass(frozen=True)
class SegMask:
    labels: np.ndarray
    num_classes: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    source_tile_id: str = ""

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class DomainLabel:
    """z = 1 marks the source location (feature flow) or source scale (scale flow)."""

    z: int

    def __post_init__(self):
        if self.z not in (0, 1):
            raise ValueError(f"domain label must be 0 or 1, got {self.z!r}")


SOURCE_LABEL = DomainLabel(1)
TARGET_LABEL = DomainLabel(0)


@dataclass(frozen=True)
class Dataset:
    tiles: tuple[Tile, ...]
    masks: Optional[tuple[SegMask, ...]] = None
    split: Split = Split.TRAIN
    num_classes: int = field(default=0)

    def __post_init__(self):
        object.__setattr__(self, "tiles", tuple(self.tiles))
        if self.masks is not None:
            object.__setattr__(self, "masks", tuple(self.masks))
        problems = validate_dataset(self)
        if problems:
            raise ValueError("invalid dataset: " + "; ".join(problems))
        if self.num_classes == 0 and self.masks:
            object.__setattr__(self, "num_classes", self.masks[0].num_classes)

    def __len__(self) -> int:
        return len(self.tiles)

    @property
    def gsd_m(self) -> float:
        return self.tiles[0].gsd_m

    @property
    def location(self) -> Location:
        return self.tiles[0].location

    @property
    def has_masks(self) -> bool:
        return self.masks is not None


def validate_tile(tile: Tile) -> list[str]:
    """Return the list of broken Tile invariants; empty when the tile is valid."""
    problems = []
    px = np.asarray(tile.pixels)
    if px.ndim != 3 or px.shape[2] != 3:
        problems.append(f"pixels must be H x W x 3, got shape {px.shape}")
    elif px.shape[0] < MIN_TILE_PX or px.shape[1] < MIN_TILE_PX:
        problems.append(f"pixels must be at least {MIN_TILE_PX}x{MIN_TILE_PX}, got {px.shape[0]}x{px.shape[1]}")
    if px.size and not np.issubdtype(px.dtype, np.floating):
        problems.append("pixels must be floating point")
    elif px.size:
        finite = np.isfinite(px)
        if not finite.all():
            problems.append("pixels must be finite")
        vals = px[finite]
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            problems.append("pixels must lie in [0, 1]")
    if not (isinstance(tile.gsd_m, (int, float)) and np.isfinite(tile.gsd_m) and tile.gsd_m > 0):
        problems.append("gsd_m must be > 0")
    try:
        Location(tile.location)
    except ValueError:
        problems.append(f"location must be one of {[l.value for l in Location]}")
    return problems


def validate_mask(mask: SegMask, shape: Optional[Sequence[int]] = None) -> list[str]:
    problems = []
    labels = np.asarray(mask.labels)
    if mask.num_classes < 1:
        problems.append("num_classes must be positive")
    if labels.ndim != 2:
        problems.append(f"labels must be 2-D, got shape {labels.shape}")
        return problems
    if not np.issubdtype(labels.dtype, np.integer):
        problems.append("labels must be integers")
    if shape is not None and tuple(labels.shape) != tuple(shape):
        problems.append(f"mask shape {labels.shape} does not match tile shape {tuple(shape)}")
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= mask.num_classes))
    if bad.any():
        problems.append(f"labels must be in [0, {mask.num_classes - 1}] or IGNORE")
    return problems


def validate_dataset(ds: Dataset) -> list[str]:
    problems = []
    if not ds.tiles:
        return ["dataset has no tiles"]
    for t in ds.tiles:
        problems += [f"{t.id}: {p}" for p in validate_tile(t)]
    if len({t.gsd_m for t in ds.tiles}) > 1:
        problems.append("all tiles must share gsd_m")
    if len({Location(t.location) for t in ds.tiles}) > 1:
        problems.append("all tiles must share location")
    if ds.masks is not None:
        if len(ds.masks) != len(ds.tiles):
            problems.append(f"{len(ds.masks)} masks for {len(ds.tiles)} tiles")
        else:
            for t, m in zip(ds.tiles, ds.masks):
                problems += [f"{t.id}: {p}" for p in validate_mask(m, t.shape)]
        if len({m.num_classes for m in ds.masks}) > 1:
            problems.append("all masks must share num_classes")
    return problems


def one_hot(mask: SegMask) -> np.ndarray:
    """K x H x W float encoding of a mask; IGNORE pixels are all-zero."""
    labels = np.asarray(mask.labels)
    k = mask.num_classes
    valid = labels != IGNORE
    if np.any(labels[valid] >= k) or np.any(labels[valid] < 0):
        raise ValueError(f"mask holds labels outside [0, {k - 1}]")
    out = np.zeros((k,) + labels.shape, dtype=np.float64)
    rows, cols = np.nonzero(valid)
    out[labels[rows, cols], rows, cols] = 1.0
    return out


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(probs, axis=0)
