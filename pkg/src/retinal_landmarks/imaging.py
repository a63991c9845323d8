"""Raster utilities: colour conversion, resizing, grayscale and image I/O.

Images are plain numpy arrays in row-major ``(height, width)`` or
``(height, width, 3)`` layout with float samples in ``[0, 1]``.  Lab images
are held in :class:`LabRaster`, one float plane per channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from retinal_landmarks.errors import InvalidInputError

# Rows sum to one, so the reference white of this matrix is (1, 1, 1).
RGB_TO_XYZ = np.array(
    [
        [0.4887180, 0.3106803, 0.2006017],
        [0.1762044, 0.8129847, 0.0108109],
        [0.0000000, 0.0102048, 0.9897952],
    ]
)
WHITE_POINT = RGB_TO_XYZ @ np.ones(3)

LAB_EPSILON = 0.008856
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class LabRaster:
    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if not (self.L.shape == self.a.shape == self.b.shape) or self.L.ndim != 2:
            raise InvalidInputError("Lab planes must be 2-D and share dimensions")

    @property
    def height(self) -> int:
        return self.L.shape[0]

    @property
    def width(self) -> int:
        return self.L.shape[1]

    def stack(self) -> np.ndarray:
        """Return an ``(H, W, 3)`` array of ``[L, a, b]`` feature vectors."""
        return np.stack([self.L, self.a, self.b], axis=-1)

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "LabRaster":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[..., 0].copy(), arr[..., 1].copy(), arr[..., 2].copy())


def _require_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInputError("image must be at least 1x1")
    return img


def lab_h(q: np.ndarray) -> np.ndarray:
    """Piecewise cube-root companding used by the Lab transform."""
    q = np.asarray(q, dtype=np.float64)
    return np.where(q > LAB_EPSILON, np.cbrt(q), 7.787 * q + 16.0 / 116.0)


def rgb_to_lab(img: np.ndarray) -> LabRaster:
    """Convert an RGB image in ``[0, 1]`` to CIE Lab.

    The RGB triple goes straight through the fixed RGB->XYZ matrix; no gamma
    linearisation is applied.
    """
    img = _require_rgb(img)
    xyz = img @ RGB_TO_XYZ.T
    fx = lab_h(xyz[..., 0] / WHITE_POINT[0])
    fy = lab_h(xyz[..., 1] / WHITE_POINT[1])
    fz = lab_h(xyz[..., 2] / WHITE_POINT[2])
    return LabRaster(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = _require_rgb(img)
    return img @ GRAY_WEIGHTS


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centre alignment, edge samples clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of a 2-D or 3-D array to ``out_h`` rows by ``out_w`` columns."""
    if out_w < 1 or out_h < 1:
        raise InvalidInputError("target dimensions must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInputError(f"cannot resize array of shape {img.shape}")
    if img.shape[0] == out_h and img.shape[1] == out_w:
        return img.copy()
    lo, hi, f = _axis_weights(img.shape[0], out_h)
    f = f.reshape((-1,) + (1,) * (img.ndim - 1))
    rows = img[lo] * (1.0 - f) + img[hi] * f
    lo, hi, f = _axis_weights(img.shape[1], out_w)
    f = f.reshape((1, -1) + (1,) * (img.ndim - 2))
    return rows[:, lo] * (1.0 - f) + rows[:, hi] * f


def normalize_samples(arr: np.ndarray) -> np.ndarray:
    """Map integer samples to floats in ``[0, 1]``; float input is passed through."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    if arr.dtype == bool:
        return arr.astype(np.float64)
    if np.issubdtype(arr.dtype, np.integer):
        info = np.iinfo(arr.dtype)
        return arr.astype(np.float64) / float(info.max)
    return arr.astype(np.float64)


def load_image(path: str | Path, mode: str = "RGB") -> np.ndarray:
    """Decode PNG/JPEG/TIFF/PPM into float samples in ``[0, 1]``.

    ``mode`` is ``"RGB"`` for colour or ``"L"`` for a single plane.
    """
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im)
            if arr.dtype != np.uint16:
                arr = np.clip(arr, 0, 65535).astype(np.uint16)
            out = normalize_samples(arr)
            if mode == "RGB":
                out = np.repeat(out[..., None], 3, axis=2)
            return out
        return normalize_samples(np.asarray(im.convert(mode)))


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Encode a float image in ``[0, 1]`` as 8-bit; format follows the suffix."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def save_map(path: str | Path, values: np.ndarray) -> None:
    """Write a float map as grayscale, min-max stretched for display."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    save_image(path, scaled)
