"""Multi-scale local-contrast saliency, z-score segmentation and candidate windows.

Per pixel, the contrast at one scale is the Euclidean distance between the
mean Lab vector of a small inner square and the mean Lab vector of a larger
outer square, both centred on the pixel and clipped at the image border.
Box means come from integral images so cost does not depend on the square
sizes.  The saliency map is the sum of contrasts over outer sizes
``c/2, c/4, c/8`` where ``c`` is the column count.

Outer sizes are read as side lengths in pixels (the alternative reading,
pixel counts, gives squares too small to span an optic disc).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from retinal_landmarks.errors import InvalidInputError
from retinal_landmarks.imaging import LabRaster

INNER_SIZE = 9
MIN_WIDTH = 64
# (height, width) of a validation window in pixels
WINDOW_SHAPE = (122, 112)
WINDOW_SCALE = 1.25


@dataclass
class SaliencyMap:
    values: np.ndarray
    scales_used: list[int]
    per_scale: list[np.ndarray] = field(default_factory=list, repr=False)


@dataclass
class InterestMask:
    mask: np.ndarray
    patch_size: int


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def empty(self) -> bool:
        return self.width <= 0 or self.height <= 0

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def clip(self, width: int, height: int) -> "Rect":
        return Rect(max(self.x0, 0), max(self.y0, 0), min(self.x1, width), min(self.y1, height))

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class CandidateRegion:
    centroid: tuple[float, float]
    bbox: Rect
    area: int
    windows: list[Rect]
    saliency_mass: float


def scale_bounds(columns: int) -> tuple[int, int]:
    """Admissible outer square sides for an image with ``columns`` columns."""
    return math.floor(columns / 8), max(1, math.ceil(columns / 2))


def default_scales(columns: int) -> list[int]:
    return [max(1, columns // 8), max(1, columns // 4), max(1, columns // 2)]


def _integral(arr: np.ndarray) -> np.ndarray:
    out = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1) + arr.shape[2:])
    out[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)
    return out


def _span(n: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    # square of side `size` around each index, clipped, as half-open bounds
    start = np.arange(n) - size // 2
    return np.clip(start, 0, n), np.clip(start + size, 0, n)


def box_mean(integral: np.ndarray, size: int) -> np.ndarray:
    """Mean over a clipped ``size x size`` square centred on every pixel."""
    h, w = integral.shape[0] - 1, integral.shape[1] - 1
    r0, r1 = _span(h, size)
    c0, c1 = _span(w, size)
    # edge padding turns the clipped corner lookups into plain slices
    half = size // 2
    pad = [(half, size), (half, size)] + [(0, 0)] * (integral.ndim - 2)
    padded = np.pad(integral, pad, mode="edge")
    rows = padded[size : size + h] - padded[:h]
    total = rows[:, size : size + w] - rows[:, :w]
    count = np.outer(r1 - r0, c1 - c0).astype(np.float64)
    if total.ndim == 3:
        count = count[..., None]
    return total / count


def contrast_saliency_at_scale(
    lab: LabRaster,
    outer_size: int,
    inner_size: int = INNER_SIZE,
    _integral_img: np.ndarray | None = None,
    _inner: np.ndarray | None = None,
) -> np.ndarray:
    lo, hi = scale_bounds(lab.width)
    if not (outer_size >= 1 and lo <= outer_size <= hi):
        raise InvalidInputError(
            f"outer size {outer_size} outside [{lo}, {hi}] for {lab.width} columns"
        )
    integral = _integral(lab.stack()) if _integral_img is None else _integral_img
    inner = box_mean(integral, inner_size) if _inner is None else _inner
    outer = box_mean(integral, outer_size)
    return np.sqrt(((inner - outer) ** 2).sum(axis=-1))


def multiscale_saliency(lab: LabRaster, scales: list[int] | None = None) -> SaliencyMap:
    if lab.width < MIN_WIDTH:
        raise InvalidInputError(f"image must be at least {MIN_WIDTH} px wide")
    scales = sorted(default_scales(lab.width) if scales is None else scales)
    integral = _integral(lab.stack())
    inner = box_mean(integral, INNER_SIZE)
    maps = [contrast_saliency_at_scale(lab, s, _integral_img=integral, _inner=inner) for s in scales]
    total = np.zeros_like(maps[0])
    for m in maps:
        total = total + m
    return SaliencyMap(total, list(scales), maps)


def default_patch_size(height: int, width: int) -> int:
    return max(1, min(height, width) // 8)


def segment_interest(
    smap: SaliencyMap | np.ndarray,
    patch_size: int | None = None,
    valid: np.ndarray | None = None,
) -> InterestMask:
    """Keep pixels whose within-tile z-score exceeds 1.

    Tiles are non-overlapping squares; a tile with zero spread keeps nothing.
    When ``valid`` is given, tile statistics use only valid pixels and
    invalid pixels are never kept.
    """
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("saliency map contains non-finite values")
    h, w = values.shape
    p = default_patch_size(h, w) if patch_size is None else int(patch_size)
    if p < 1:
        raise InvalidInputError("patch size must be >= 1")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != values.shape:
            raise InvalidInputError("valid mask must match the saliency map")
    mask = np.zeros((h, w), dtype=bool)
    for y in range(0, h, p):
        for x in range(0, w, p):
            tile = values[y : y + p, x : x + p]
            sel = None if valid is None else valid[y : y + p, x : x + p]
            vals = tile if sel is None else tile[sel]
            if vals.size == 0:
                continue
            sd = vals.std()
            # round-off can give a flat tile a tiny nonzero spread
            if sd <= 1e-12 * max(1.0, float(np.abs(vals).max())):
                continue
            keep = (tile - vals.mean()) / sd > 1.0
            mask[y : y + p, x : x + p] = keep if sel is None else keep & sel
    return InterestMask(mask, p)


def region_windows(
    cx: float,
    cy: float,
    width: int,
    height: int,
    window: tuple[int, int] = WINDOW_SHAPE,
    scale: float = WINDOW_SCALE,
) -> list[Rect]:
    """Centred window, four half-window shifts and one enlarged window, clipped."""
    wh, ww = window
    dx, dy = ww // 2, wh // 2
    centres = [(cx, cy), (cx - dx, cy), (cx + dx, cy), (cx, cy - dy), (cx, cy + dy)]
    out = []
    for ux, uy in centres:
        x0 = int(round(ux - ww / 2))
        y0 = int(round(uy - wh / 2))
        out.append(Rect(x0, y0, x0 + ww, y0 + wh).clip(width, height))
    sw, sh = int(round(ww * scale)), int(round(wh * scale))
    x0 = int(round(cx - sw / 2))
    y0 = int(round(cy - sh / 2))
    out.append(Rect(x0, y0, x0 + sw, y0 + sh).clip(width, height))
    return out


def extract_candidates(
    mask: InterestMask | np.ndarray,
    smap: SaliencyMap | np.ndarray,
    window: tuple[int, int] = WINDOW_SHAPE,
) -> list[CandidateRegion]:
    """8-connected components of the mask, heaviest saliency mass first."""
    m = mask.mask if isinstance(mask, InterestMask) else np.asarray(mask, dtype=bool)
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    if not m.any():
        return []
    h, w = m.shape
    labels, n = ndimage.label(m, structure=np.ones((3, 3), dtype=int))
    index = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(values), labels, index)
    masses = ndimage.sum_labels(values, labels, index)
    centres = ndimage.center_of_mass(np.ones_like(values), labels, index)
    boxes = ndimage.find_objects(labels)
    regions = []
    for k in range(n):
        cy, cx = centres[k]
        sl = boxes[k]
        bbox = Rect(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
        wins = [r for r in region_windows(cx, cy, w, h, window) if not r.empty]
        regions.append(CandidateRegion((float(cx), float(cy)), bbox, int(areas[k]), wins, float(masses[k])))
    # stable sort keeps label order for equal masses
    regions.sort(key=lambda r: -r.saliency_mass)
    return regions
