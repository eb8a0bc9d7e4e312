"""Bilinear and nearest-neighbour rescaling with a half-pixel-centre convention.

Output pixel ``i`` samples input coordinate ``(i + 0.5) / r - 0.5``; samples
outside the input are clamped to the border. Output size along an axis of
length ``n`` is ``floor(n * r + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import MIN_TILE_PX, Dataset, SegMask, Tile

MAX_RATIO = 16.0


@dataclass(frozen=True)
class ScaleFactor:
    ratio: float

    def __post_init__(self):
        if not (math.isfinite(self.ratio) and 0.0 < self.ratio <= MAX_RATIO):
            raise ValueError(f"scale ratio must be in (0, {MAX_RATIO}], got {self.ratio}")

    def out_len(self, n: int) -> int:
        return int(math.floor(n * self.ratio + 0.5))

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        oh, ow = self.out_len(h), self.out_len(w)
        if oh < 1 or ow < 1:
            raise ValueError(f"resizing {h}x{w} by {self.ratio} gives degenerate {oh}x{ow} output")
        return oh, ow


def _as_factor(factor) -> ScaleFactor:
    return factor if isinstance(factor, ScaleFactor) else ScaleFactor(float(factor))


def _linear_taps(n_in: int, n_out: int, ratio: float):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / ratio - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _nearest_index(n_in: int, n_out: int, ratio: float) -> np.ndarray:
    # floor of the mapped centre + 0.5 == index of the input pixel containing it
    idx = np.floor((np.arange(n_out, dtype=np.float64) + 0.5) / ratio).astype(np.intp)
    return np.clip(idx, 0, n_in - 1)


def _lerp_axis(x: np.ndarray, axis: int, n_out: int, ratio: float) -> np.ndarray:
    lo, hi, w = _linear_taps(x.shape[axis], n_out, ratio)
    a = np.take(x, lo, axis=axis)
    b = np.take(x, hi, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = n_out
    w = w.reshape(shape).astype(x.dtype, copy=False)
    # a + w*(b-a) keeps constants exact; the clip keeps rounding inside [a, b]
    out = a + w * (b - a)
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def resize_bilinear(raster: np.ndarray, factor) -> np.ndarray:
    """Bilinearly rescale the last two axes of ``raster`` by ``factor``."""
    factor = _as_factor(factor)
    raster = np.asarray(raster)
    if raster.ndim < 2:
        raise ValueError("raster needs at least two spatial axes")
    h, w = raster.shape[-2:]
    oh, ow = factor.out_shape(h, w)
    if factor.ratio == 1.0:
        return raster.copy()
    if not np.issubdtype(raster.dtype, np.floating):
        raster = raster.astype(np.float64)
    out = _lerp_axis(raster, raster.ndim - 2, oh, factor.ratio)
    return _lerp_axis(out, raster.ndim - 1, ow, factor.ratio)


def resize_nearest(raster: np.ndarray, factor) -> np.ndarray:
    factor = _as_factor(factor)
    raster = np.asarray(raster)
    h, w = raster.shape[-2:]
    oh, ow = factor.out_shape(h, w)
    rows = _nearest_index(h, oh, factor.ratio)
    cols = _nearest_index(w, ow, factor.ratio)
    return raster[..., rows[:, None], cols[None, :]]


def resize_tile(tile: Tile, factor) -> Tile:
    factor = _as_factor(factor)
    chw = resize_bilinear(tile.chw(), factor)
    return replace(tile, pixels=np.ascontiguousarray(chw.transpose(1, 2, 0)), gsd_m=tile.gsd_m / factor.ratio)


def resize_mask_nearest(mask: SegMask, factor) -> SegMask:
    return SegMask(resize_nearest(mask.labels, factor), mask.num_classes)


def match_scale(tile: Tile, target_gsd: float) -> Tile:
    """Resample ``tile`` so that its GSD becomes ``target_gsd``.

    The returned tile carries ``target_gsd`` verbatim (not ``gsd / r``) so the
    bookkeeping is exact; the location tag is untouched.
    """
    if not target_gsd > 0:
        raise ValueError(f"target_gsd must be > 0, got {target_gsd}")
    if tile.gsd_m == target_gsd:
        return tile
    factor = ScaleFactor(tile.gsd_m / target_gsd)
    oh, ow = factor.out_shape(*tile.shape)
    if oh < MIN_TILE_PX or ow < MIN_TILE_PX:
        raise ValueError(f"matching {tile.id} to gsd {target_gsd} gives {oh}x{ow} px, below {MIN_TILE_PX}")
    return replace(resize_tile(tile, factor), gsd_m=target_gsd)


def match_scale_batch(images: np.ndarray, gsd_m: float, target_gsd: float) -> np.ndarray:
    """Batched ``match_scale`` for N x C x H x W arrays."""
    if gsd_m == target_gsd:
        return images
    factor = ScaleFactor(gsd_m / target_gsd)
    oh, ow = factor.out_shape(*images.shape[-2:])
    if oh < MIN_TILE_PX or ow < MIN_TILE_PX:
        raise ValueError(f"matching to gsd {target_gsd} gives {oh}x{ow} px, below {MIN_TILE_PX}")
    return resize_bilinear(images, factor)


def resample_dataset(ds: Dataset, target_gsd: float) -> Dataset:
    """``match_scale`` every tile; masks follow with nearest-neighbour labels."""
    if ds.gsd_m == target_gsd:
        return ds
    factor = ScaleFactor(ds.gsd_m / target_gsd)
    tiles = tuple(match_scale(t, target_gsd) for t in ds.tiles)
    masks = None
    if ds.masks is not None:
        masks = tuple(resize_mask_nearest(m, factor) for m in ds.masks)
    return Dataset(tiles, masks, ds.split, ds.num_classes)
