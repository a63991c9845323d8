"""Histogram-of-oriented-gradients descriptor for 122x112 validation windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from retinal_landmarks.errors import InvalidInputError

CELL = 8
BLOCK_CELLS = 2
N_BINS = 9
BLOCK_DIM = BLOCK_CELLS * BLOCK_CELLS * N_BINS
WINDOW_SHAPE = (122, 112)
NORM_EPS = 1e-12


@dataclass(frozen=True)
class HogDescriptor:
    values: np.ndarray
    blocks_x: int
    blocks_y: int

    def blocks(self) -> np.ndarray:
        """Per-block 36-dim vectors, shape ``(blocks_y * blocks_x, 36)``."""
        return self.values.reshape(-1, BLOCK_DIM)

    def __len__(self) -> int:
        return self.values.size


def gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centred ``[-1, 0, 1]`` differences; border rows/columns get zero."""
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    gy[1:-1, :] = img[2:, :] - img[:-2, :]
    return gx, gy


def cell_histograms(img: np.ndarray) -> np.ndarray:
    """Unsigned 9-bin orientation histograms per 8x8 cell.

    Bin ``k`` is centred on ``20 k`` degrees; each pixel splits its gradient
    magnitude between the two nearest centres, wrapping at 180 degrees.
    """
    gx, gy = gradients(img)
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    width = 180.0 / N_BINS
    pos = ang / width
    lo = np.floor(pos).astype(np.intp) % N_BINS
    hi = (lo + 1) % N_BINS
    w_hi = pos - np.floor(pos)
    ny, nx = img.shape[0] // CELL, img.shape[1] // CELL
    h, w = ny * CELL, nx * CELL
    cell_idx = (np.arange(h)[:, None] // CELL) * nx + (np.arange(w)[None, :] // CELL)
    cell_idx = cell_idx.ravel()
    m = mag[:h, :w].ravel()
    hist = np.zeros(ny * nx * N_BINS)
    np.add.at(hist, cell_idx * N_BINS + lo[:h, :w].ravel(), m * (1.0 - w_hi[:h, :w].ravel()))
    np.add.at(hist, cell_idx * N_BINS + hi[:h, :w].ravel(), m * w_hi[:h, :w].ravel())
    return hist.reshape(ny, nx, N_BINS)


def hog(window: np.ndarray) -> HogDescriptor:
    """HOG over 16x16 blocks (2x2 cells of 8x8) at an 8-pixel stride.

    ``window`` must be a grayscale array of exactly 122 rows by 112 columns,
    giving 14 x 13 blocks and a 6552-long descriptor.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape != WINDOW_SHAPE:
        raise InvalidInputError(f"HOG window must be {WINDOW_SHAPE}, got {window.shape}")
    cells = cell_histograms(window)
    ny, nx = cells.shape[:2]
    by, bx = ny - BLOCK_CELLS + 1, nx - BLOCK_CELLS + 1
    blocks = np.concatenate(
        [
            cells[0:by, 0:bx],
            cells[0:by, 1 : bx + 1],
            cells[1 : by + 1, 0:bx],
            cells[1 : by + 1, 1 : bx + 1],
        ],
        axis=-1,
    )
    norms = np.linalg.norm(blocks, axis=-1, keepdims=True)
    blocks = blocks / (norms + NORM_EPS)
    return HogDescriptor(blocks.reshape(-1), bx, by)
