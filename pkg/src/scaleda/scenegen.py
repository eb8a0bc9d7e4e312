"""Procedural overhead scenes rendered at a chosen ground sample distance.

Scenes live in world coordinates (meters). Each tile index owns an infinite
plane partitioned into square cells; a cell's objects are drawn from an RNG
keyed on ``(seed, tile_index, cell)``, so a tile rendered at two GSDs shows
the same physical layout wherever the two windows overlap. Objects are
rasterized with 4x4 supersampling: a pixel takes an object's label when at
least half of its subsamples fall inside, and its colour is the mean of the
subsample colours.

Classes: 0 surface, 1 building, 2 vegetation, 3 tree, 4 car.

On-disk layout::

    <dir>/meta.json          format_version, gsd_m, location, num_classes, split, tiles
    <dir>/img/<id>.png       16-bit RGB
    <dir>/mask/<id>.png      8-bit single channel, 255 = IGNORE
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import cv2
import numpy as np

from .core import IGNORE, Dataset, Location, SegMask, Split, Tile

FORMAT_VERSION = 1
CLASS_NAMES = ("surface", "building", "vegetation", "tree", "car")
SUPERSAMPLE = 4
CELL_M = 24.0
QUANT = 65535

SURFACE, BUILDING, VEGETATION, TREE, CAR = range(5)
PAINT_ORDER = (VEGETATION, BUILDING, TREE, CAR)
SHAPES = {BUILDING: "rect", VEGETATION: "ellipse", TREE: "disk", CAR: "rect"}


@dataclass(frozen=True)
class ObjectClass:
    """Appearance and size statistics for one object class at one location.

    ``length_m`` / ``width_m`` are uniform ranges; for trees ``length_m`` is
    the crown diameter and ``width_m`` is ignored.
    """

    color_mean: tuple[float, float, float]
    color_std: float
    density_per_ha: float
    length_m: tuple[float, float]
    width_m: tuple[float, float]

    @property
    def max_extent_m(self) -> float:
        return math.hypot(self.length_m[1], self.width_m[1])


@dataclass(frozen=True)
class LocationProfile:
    name: str
    surface_color: tuple[float, float, float]
    surface_std: float
    objects: Mapping[int, ObjectClass]
    texture_amplitude: float = 0.05
    texture_cell_m: float = 0.5
    sensor_noise: float = 0.01

    def validate(self) -> list[str]:
        problems = []
        for cls, oc in self.objects.items():
            name = CLASS_NAMES[cls]
            if oc.density_per_ha < 0:
                problems.append(f"{name}: density must be nonnegative")
            if min(oc.length_m + oc.width_m) <= 0 or oc.length_m[0] > oc.length_m[1] or oc.width_m[0] > oc.width_m[1]:
                problems.append(f"{name}: size ranges must be positive and ordered")
        if self.texture_cell_m <= 0:
            problems.append("texture_cell_m must be > 0")
        return problems

    @property
    def max_extent_m(self) -> float:
        return max((oc.max_extent_m for oc in self.objects.values()), default=0.0)

    def with_densities(self, scale: float = 0.0, only: Optional[Mapping[int, float]] = None) -> "LocationProfile":
        objs = {}
        for cls, oc in self.objects.items():
            d = only[cls] if only is not None and cls in only else oc.density_per_ha * scale
            objs[cls] = replace(oc, density_per_ha=d)
        return replace(self, objects=objs)


def _profile_a() -> LocationProfile:
    return LocationProfile(
        name="loc-A",
        surface_color=(0.52, 0.54, 0.58),
        surface_std=0.03,
        objects={
            VEGETATION: ObjectClass((0.42, 0.62, 0.40), 0.04, 24.0, (5.0, 12.0), (4.0, 9.0)),
            BUILDING: ObjectClass((0.30, 0.33, 0.45), 0.04, 40.0, (5.0, 11.0), (4.0, 8.0)),
            TREE: ObjectClass((0.16, 0.40, 0.22), 0.03, 60.0, (2.5, 5.0), (2.5, 5.0)),
            CAR: ObjectClass((0.80, 0.80, 0.86), 0.08, 140.0, (2.0, 2.0), (1.5, 1.5)),
        },
        texture_amplitude=0.06,
        texture_cell_m=0.4,
        sensor_noise=0.01,
    )


def _profile_b() -> LocationProfile:
    return LocationProfile(
        name="loc-B",
        surface_color=(0.62, 0.56, 0.46),
        surface_std=0.04,
        objects={
            VEGETATION: ObjectClass((0.58, 0.66, 0.32), 0.05, 36.0, (5.0, 12.0), (4.0, 9.0)),
            BUILDING: ObjectClass((0.66, 0.34, 0.28), 0.05, 22.0, (6.0, 12.0), (5.0, 9.0)),
            TREE: ObjectClass((0.30, 0.44, 0.16), 0.04, 40.0, (3.0, 6.0), (3.0, 6.0)),
            CAR: ObjectClass((0.88, 0.84, 0.76), 0.10, 70.0, (2.0, 2.0), (1.5, 1.5)),
        },
        texture_amplitude=0.10,
        texture_cell_m=0.7,
        sensor_noise=0.015,
    )


PROFILES = {"loc-A": _profile_a, "loc-B": _profile_b}


def stock_profile(name: str) -> LocationProfile:
    try:
        return PROFILES[name]()
    except KeyError:
        raise KeyError(f"unknown location profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    gsd_m: float
    tile_px: int
    location_profile: LocationProfile = field(default_factory=_profile_a)
    num_tiles: int = 8
    num_classes: int = 5
    location: Location = Location.SOURCE
    split: Split = Split.TRAIN
    id_prefix: str = "t"
    tile_offset: int = 0

    def validate(self) -> list[str]:
        problems = list(self.location_profile.validate())
        if not self.gsd_m > 0:
            problems.append("gsd_m must be > 0")
        if self.tile_px < 8:
            problems.append("tile_px must be >= 8")
        if self.num_tiles < 1:
            problems.append("num_tiles must be >= 1")
        if self.num_classes != len(CLASS_NAMES):
            problems.append(f"num_classes must be {len(CLASS_NAMES)} for generated scenes")
        extent = self.tile_px * self.gsd_m
        largest = self.location_profile.max_extent_m
        if extent < largest:
            problems.append(f"tile extent {extent:.2f} m cannot fit objects up to {largest:.2f} m")
        return problems


@dataclass(frozen=True)
class SceneObject:
    cls: int
    cx: float
    cy: float
    length: float
    width: float
    angle: float
    color: tuple[float, float, float]


def _cell_rng(seed: int, tile_index: int, cx: int, cy: int) -> np.random.Generator:
    # SeedSequence hashes the whole key, so cells/tiles are independent of traversal order
    return np.random.default_rng([seed & 0xFFFFFFFF, tile_index, cx & 0xFFFFFFFF, cy & 0xFFFFFFFF, 0x5CE7])


def scene_objects(profile: LocationProfile, seed: int, tile_index: int, extent_m: float) -> list[SceneObject]:
    """Objects (in paint order) that can touch the window [0, extent_m]^2."""
    margin = profile.max_extent_m
    lo = int(math.floor(-margin / CELL_M))
    hi = int(math.floor((extent_m + margin) / CELL_M))
    cell_ha = CELL_M * CELL_M / 10_000.0
    by_class: dict[int, list[SceneObject]] = {c: [] for c in PAINT_ORDER}
    for cy in range(lo, hi + 1):
        for cx in range(lo, hi + 1):
            rng = _cell_rng(seed, tile_index, cx, cy)
            for cls in PAINT_ORDER:
                oc = profile.objects.get(cls)
                # draw the count even for absent classes so other classes keep their streams
                n = rng.poisson(oc.density_per_ha * cell_ha) if oc is not None else 0
                for _ in range(n):
                    x = (cx + rng.random()) * CELL_M
                    y = (cy + rng.random()) * CELL_M
                    length = rng.uniform(*oc.length_m)
                    width = length if SHAPES[cls] == "disk" else rng.uniform(*oc.width_m)
                    angle = rng.uniform(0.0, 2.0 * math.pi)
                    color = np.clip(np.asarray(oc.color_mean) + rng.normal(0.0, oc.color_std, 3), 0.0, 1.0)
                    r = math.hypot(length, width) / 2
                    if x + r < 0 or y + r < 0 or x - r > extent_m or y - r > extent_m:
                        continue
                    by_class[cls].append(SceneObject(cls, x, y, length, width, angle, tuple(float(c) for c in color)))
    return [o for cls in PAINT_ORDER for o in by_class[cls]]


def _inside(obj: SceneObject, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx, dy = xs - obj.cx, ys - obj.cy
    c, s = math.cos(obj.angle), math.sin(obj.angle)
    u = (c * dx + s * dy) / (obj.length / 2)
    v = (-s * dx + c * dy) / (obj.width / 2)
    if SHAPES[obj.cls] == "rect":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    return u * u + v * v <= 1.0


def rasterize_object(obj: SceneObject, gsd_m: float, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, slice, slice]:
    """Subsample inside-mask and pixel footprint of one object within a tile.

    Returns ``(sub_inside, footprint, rows, cols)`` where ``footprint`` is the
    boolean >=50%-coverage mask over the pixel window ``[rows, cols]``.
    """
    h, w = shape
    r = math.hypot(obj.length, obj.width) / 2
    r0 = max(int(math.floor((obj.cy - r) / gsd_m)), 0)
    r1 = min(int(math.ceil((obj.cy + r) / gsd_m)), h)
    c0 = max(int(math.floor((obj.cx - r) / gsd_m)), 0)
    c1 = min(int(math.ceil((obj.cx + r) / gsd_m)), w)
    rows, cols = slice(r0, max(r0, r1)), slice(c0, max(c0, c1))
    if r1 <= r0 or c1 <= c0:
        empty = np.zeros((0, 0), bool)
        return empty, empty, rows, cols
    ss = SUPERSAMPLE
    off = (np.arange(ss) + 0.5) / ss
    ys = ((np.arange(r0, r1)[:, None] + off[None, :]).ravel()) * gsd_m
    xs = ((np.arange(c0, c1)[:, None] + off[None, :]).ravel()) * gsd_m
    sub = _inside(obj, xs[None, :], ys[:, None])
    cover = sub.reshape(r1 - r0, ss, c1 - c0, ss).mean(axis=(1, 3))
    return sub, cover >= 0.5, rows, cols


def _hash_uniform(seed: int, tile_index: int, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """splitmix64-style lattice hash -> uniform [0, 1)."""
    with np.errstate(over="ignore"):
        z = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F))
        z ^= np.uint64((seed * 0x165667B1 + tile_index * 0x27D4EB2F) & 0xFFFFFFFFFFFFFFFF)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _texture(seed: int, tile_index: int, xs: np.ndarray, ys: np.ndarray, cell_m: float) -> np.ndarray:
    """World-anchored bilinear value noise in [-1, 1] sampled at (ys x xs)."""
    gx, gy = xs / cell_m, ys / cell_m
    x0, y0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - x0, gy - y0
    x0 = x0.astype(np.int64)[None, :]
    y0 = y0.astype(np.int64)[:, None]
    fx, fy = fx[None, :], fy[:, None]

    def v(dx, dy):
        return _hash_uniform(seed, tile_index, x0 + dx + (1 << 20), y0 + dy + (1 << 20))

    top = v(0, 0) * (1 - fx) + v(1, 0) * fx
    bot = v(0, 1) * (1 - fx) + v(1, 1) * fx
    return 2.0 * (top * (1 - fy) + bot * fy) - 1.0


def render_tile(profile: LocationProfile, seed: int, tile_index: int, gsd_m: float, tile_px: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one tile: (H x W x 3 pixels quantized to 16 bit, H x W uint8 labels)."""
    h = w = tile_px
    ss = SUPERSAMPLE
    labels = np.zeros((h, w), np.uint8)
    sub_rgb = np.empty((h * ss, w * ss, 3), np.float64)
    sub_rgb[:] = profile.surface_color
    tile_rng = np.random.default_rng([seed & 0xFFFFFFFF, tile_index, 0xC010])
    sub_rgb += tile_rng.normal(0.0, profile.surface_std, 3)
    for obj in scene_objects(profile, seed, tile_index, tile_px * gsd_m):
        sub, foot, rows, cols = rasterize_object(obj, gsd_m, (h, w))
        if not foot.size:
            continue
        labels[rows, cols][foot] = obj.cls
        window = sub_rgb[rows.start * ss:rows.stop * ss, cols.start * ss:cols.stop * ss]
        window[sub] = obj.color
    off = (np.arange(ss) + 0.5) / ss
    coords = ((np.arange(h)[:, None] + off[None, :]).ravel()) * gsd_m
    tex = _texture(seed, tile_index, coords, coords, profile.texture_cell_m)
    sub_rgb += profile.texture_amplitude * tex[..., None]
    rgb = sub_rgb.reshape(h, ss, w, ss, 3).mean(axis=(1, 3))
    pix_rng = np.random.default_rng([seed & 0xFFFFFFFF, tile_index, 0x5E45, int(round(gsd_m * 1e6))])
    rgb += pix_rng.normal(0.0, profile.sensor_noise, rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    return quantize(rgb), labels


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(pixels * QUANT) / QUANT


def generate(spec: SceneSpec) -> Dataset:
    problems = spec.validate()
    if problems:
        raise ValueError("invalid scene spec: " + "; ".join(problems))
    tiles, masks = [], []
    for i in range(spec.num_tiles):
        idx = spec.tile_offset + i
        pixels, labels = render_tile(spec.location_profile, spec.seed, idx, spec.gsd_m, spec.tile_px)
        tiles.append(Tile(pixels, spec.gsd_m, spec.location, f"{spec.id_prefix}{idx:05d}"))
        masks.append(SegMask(labels, spec.num_classes))
    return Dataset(tuple(tiles), tuple(masks), spec.split, spec.num_classes)


def write_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "img").mkdir(parents=True, exist_ok=True)
    if ds.masks is not None:
        (directory / "mask").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, tile in enumerate(ds.tiles):
        q = np.round(np.asarray(tile.pixels, np.float64) * QUANT).astype(np.uint16)
        if not cv2.imwrite(str(directory / "img" / f"{tile.id}.png"), q[..., ::-1]):
            raise OSError(f"failed to write image for tile {tile.id}")
        if ds.masks is not None:
            lab = np.asarray(ds.masks[i].labels).astype(np.uint8)
            if not cv2.imwrite(str(directory / "mask" / f"{tile.id}.png"), lab):
                raise OSError(f"failed to write mask for tile {tile.id}")
        entries.append({"id": tile.id, "height": int(tile.shape[0]), "width": int(tile.shape[1])})
    meta = {
        "format_version": FORMAT_VERSION,
        "gsd_m": ds.gsd_m,
        "location": Location(ds.location).value,
        "num_classes": int(ds.num_classes),
        "split": Split(ds.split).value,
        "has_masks": ds.masks is not None,
        "tiles": entries,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return directory


def read_dataset(directory: str | Path, with_masks: bool = True) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"dataset metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{meta_path}: unknown format_version {version!r}")
    for key in ("gsd_m", "location", "num_classes", "tiles"):
        if key not in meta:
            raise ValueError(f"{meta_path}: missing key {key!r}")
    gsd = float(meta["gsd_m"])
    location = Location(meta["location"])
    k = int(meta["num_classes"])
    has_masks = bool(meta.get("has_masks", (directory / "mask").is_dir())) and with_masks
    tiles, masks = [], []
    for entry in meta["tiles"]:
        tid = entry["id"]
        img_path = directory / "img" / f"{tid}.png"
        raw = cv2.imread(str(img_path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise FileNotFoundError(f"tile image not found or unreadable: {img_path}")
        if raw.ndim != 3 or raw.shape[2] != 3:
            raise ValueError(f"{img_path}: expected RGB image, got shape {raw.shape}")
        scale = QUANT if raw.dtype == np.uint16 else 255
        pixels = raw[..., ::-1].astype(np.float64) / scale
        if "height" in entry and (entry["height"], entry["width"]) != pixels.shape[:2]:
            raise ValueError(f"{img_path}: size {pixels.shape[:2]} disagrees with meta.json")
        tiles.append(Tile(pixels, gsd, location, tid))
        if has_masks:
            mask_path = directory / "mask" / f"{tid}.png"
            lab = cv2.imread(str(mask_path), cv2.IMREAD_UNCHANGED)
            if lab is None:
                raise FileNotFoundError(f"tile mask not found or unreadable: {mask_path}")
            if lab.shape != pixels.shape[:2]:
                raise ValueError(f"{mask_path}: mask {lab.shape} and image {pixels.shape[:2]} dimensions differ")
            masks.append(SegMask(lab.astype(np.int64), k))
    split = Split(meta.get("split", "train"))
    return Dataset(tuple(tiles), tuple(masks) if has_masks else None, split, k)


def remap_classes(ds: Dataset, mapping: Mapping[int, int]) -> Dataset:
    """Relabel masks through ``mapping`` (old class -> new class or IGNORE)."""
    if ds.masks is None:
        raise ValueError("dataset has no masks to remap")
    k = ds.num_classes
    missing = [c for c in range(k) if c not in mapping]
    if missing:
        raise ValueError(f"mapping is not total: no entry for classes {missing}")
    targets = sorted({v for v in mapping.values() if v != IGNORE})
    if not targets:
        raise ValueError("mapping sends every class to IGNORE (K would be 0)")
    if targets != list(range(len(targets))):
        raise ValueError(f"new classes must be 0..K-1, got {targets}")
    lut = np.full(256, IGNORE, np.int64)
    for old, new in mapping.items():
        lut[old] = new
    new_k = len(targets)
    masks = tuple(SegMask(lut[np.asarray(m.labels)], new_k) for m in ds.masks)
    return Dataset(ds.tiles, masks, ds.split, new_k)
