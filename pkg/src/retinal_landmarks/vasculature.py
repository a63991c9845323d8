"""Vessel main-course extraction, parabola fitting and fovea/macula localisation.

The thick vessel arcades leaving the optic disc are modelled as a parabola
whose vertex is pinned to the disc centre.  In a frame translated to the
vertex and rotated by ``phi`` the curve is ``y' = x'^2 / (4 p)``; the fovea
sits ``2.5 D`` from the vertex along the ``+y'`` axis, on the side the
parabola opens toward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _sk_skeletonize

from retinal_landmarks.errors import FitError, InvalidInputError
from retinal_landmarks.imaging import resize_bilinear, to_grayscale
from retinal_landmarks.saliency import Rect

FOVEA_DISTANCE = 2.5
MACULA_WINDOW = 1.5
N_PHI_SEEDS = 64
MIN_FIT_POINTS = 6


@dataclass
class VesselMap:
    binary: np.ndarray
    source: str  # "external-file" or "baseline-segmenter"


@dataclass
class MainCoursePoints:
    points: np.ndarray  # (N, 2) x, y
    weights: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.points)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x,y,weight\n")
            for (x, y), w in zip(self.points, self.weights):
                fh.write(f"{x:g},{y:g},{float(w)!r}\n")


@dataclass
class ParabolaFit:
    vertex: tuple[float, float]
    p: float
    phi: float
    rss: float
    iterations: int = 0

    @property
    def axis(self) -> np.ndarray:
        """Unit vector of the ``+y'`` axis in image coordinates."""
        return np.array([-math.sin(self.phi), math.cos(self.phi)])


@dataclass
class FoveaEstimate:
    x: float
    y: float
    clipped: bool = False

    @property
    def point(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class MaculaAssessment:
    fovea: tuple[float, float]
    window: Rect
    template_error: float
    suspicious: bool


def _line_kernel(length: int, angle_deg: float) -> np.ndarray:
    k = np.zeros((length, length), np.uint8)
    c = (length - 1) / 2.0
    dx = math.cos(math.radians(angle_deg)) * c
    dy = math.sin(math.radians(angle_deg)) * c
    p0 = (int(round(c - dx)), int(round(c - dy)))
    p1 = (int(round(c + dx)), int(round(c + dy)))
    cv2.line(k, p0, p1, 1, 1)
    return k


def remove_small_components(binary: np.ndarray, min_size: int) -> np.ndarray:
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return binary.astype(bool)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


def baseline_segment_vessels(
    img: np.ndarray,
    orientations: int = 12,
    line_length: int = 15,
    percentile: float = 92.0,
    min_component: int = 50,
) -> VesselMap:
    """Line-opening top-hat vessel segmentation on the inverted green channel.

    The supremum of openings by rotated line elements keeps elongated dark
    structures; subtracting its opening by a disc of the same diameter
    leaves only the thin ones.
    """
    img = np.asarray(img, dtype=np.float64)
    green = img[..., 1] if img.ndim == 3 else img
    inv = (1.0 - green).astype(np.float32)
    sup = np.full_like(inv, -np.inf)
    for i in range(orientations):
        kernel = _line_kernel(line_length, 180.0 * i / orientations)
        np.maximum(sup, cv2.morphologyEx(inv, cv2.MORPH_OPEN, kernel), out=sup)
    disc = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (line_length, line_length))
    response = sup - cv2.morphologyEx(sup, cv2.MORPH_OPEN, disc)
    thr = np.percentile(response, percentile)
    binary = (response > thr) & (response > 1e-6)
    return VesselMap(remove_small_components(binary, min_component), "baseline-segmenter")


def vessel_map_from_array(arr: np.ndarray) -> VesselMap:
    """Wrap an externally produced map; any nonzero sample is vessel."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return VesselMap(arr != 0, "external-file")


def _binary(m) -> np.ndarray:
    return np.asarray(m.binary if isinstance(m, VesselMap) else m, dtype=bool)


def skeletonize(vmap) -> np.ndarray:
    """One-pixel-wide 8-connected centreline by iterative thinning."""
    b = _binary(vmap)
    if not b.any():
        return np.zeros_like(b)
    return _sk_skeletonize(b)


def distance_transform(vmap) -> np.ndarray:
    """Exact Euclidean distance from each vessel pixel to the nearest background pixel.

    A map without any background pixel has no defined distance; ``inf`` is
    returned on every vessel pixel in that case.
    """
    b = _binary(vmap)
    if b.all():
        return np.full(b.shape, np.inf)
    return ndimage.distance_transform_edt(b)


def extract_main_course(skeleton: np.ndarray, dist_map: np.ndarray, q: float = 0.35) -> MainCoursePoints:
    """Keep the heaviest skeleton pixels holding the top ``q`` share of thickness mass."""
    skeleton = np.asarray(skeleton, dtype=bool)
    if skeleton.shape != dist_map.shape:
        raise InvalidInputError("skeleton and distance map must share dimensions")
    if not 0 < q <= 1:
        raise InvalidInputError("retention fraction must lie in (0, 1]")
    weights = np.where(skeleton, dist_map, 0.0)
    ys, xs = np.nonzero(weights > 0)
    if len(xs) == 0:
        return MainCoursePoints(np.zeros((0, 2)), np.zeros(0))
    w = weights[ys, xs]
    ordered = np.sort(w)[::-1]
    cum = np.cumsum(ordered) / ordered.sum()
    idx = int(np.searchsorted(cum, q - 1e-12))
    thr = ordered[min(idx, len(ordered) - 1)]
    keep = w >= thr
    return MainCoursePoints(np.column_stack([xs[keep], ys[keep]]).astype(np.float64), w[keep])


def _rotate(dx: np.ndarray, dy: np.ndarray, phi: float):
    c, s = math.cos(phi), math.sin(phi)
    return c * dx + s * dy, -s * dx + c * dy


def _rss(dx, dy, a, phi) -> float:
    xr, yr = _rotate(dx, dy, phi)
    r = yr - a * xr * xr
    return float(r @ r)


def _inner_curvature(dx, dy, phi) -> float:
    # closed-form least-squares curvature for a fixed orientation
    xr, yr = _rotate(dx, dy, phi)
    x2 = xr * xr
    den = float(x2 @ x2)
    return float(yr @ x2) / den if den > 0 else 0.0


def _gauss_newton(dx, dy, a, phi, max_iter=100):
    """Gauss-Newton on (curvature, phi) with step halving; rss never increases."""
    cost = _rss(dx, dy, a, phi)
    it = 0
    for it in range(1, max_iter + 1):
        xr, yr = _rotate(dx, dy, phi)
        r = yr - a * xr * xr
        jac = np.column_stack([-xr * xr, -xr - 2.0 * a * xr * yr])
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        t = 1.0
        improved = False
        while t > 1e-10:
            na, nphi = a + t * step[0], phi + t * step[1]
            ncost = _rss(dx, dy, na, nphi)
            if ncost <= cost:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        done = abs(t * step[1]) < 1e-14 and abs(t * step[0]) <= 1e-14 * max(abs(a), 1e-300)
        a, phi, cost = na, nphi, ncost
        if done or cost == 0.0:
            break
    return a, phi, cost, it


def fit_parabola(points, od_center: tuple[float, float], n_seeds: int = N_PHI_SEEDS) -> ParabolaFit:
    """Least-squares parabola with vertex pinned at ``od_center``.

    Each of ``n_seeds`` evenly spaced starting orientations gets a closed-form
    curvature and is refined by Gauss-Newton; the lowest residual wins
    (earliest seed on ties).  The result is reported with ``p > 0`` and
    ``phi`` in ``[0, 2 pi)``.
    """
    pts = np.asarray(points.points if isinstance(points, MainCoursePoints) else points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < MIN_FIT_POINTS:
        raise InvalidInputError(f"need at least {MIN_FIT_POINTS} (x, y) points")
    dx = pts[:, 0] - od_center[0]
    dy = pts[:, 1] - od_center[1]
    best = None
    for i in range(n_seeds):
        phi0 = 2.0 * math.pi * i / n_seeds
        a0 = _inner_curvature(dx, dy, phi0)
        a, phi, cost, it = _gauss_newton(dx, dy, a0, phi0)
        if best is None or cost < best[2]:
            best = (a, phi, cost, it)
    a, phi, cost, it = best
    xr, _ = _rotate(dx, dy, phi)
    sagitta = abs(a) * float((xr * xr).max())
    if not np.isfinite(a) or sagitta < 1e-6:
        raise FitError("points are collinear through the vertex; parabola is unidentifiable")
    if a < 0:
        a, phi = -a, phi + math.pi
    phi = math.fmod(phi, 2.0 * math.pi)
    if phi < 0:
        phi += 2.0 * math.pi
    return ParabolaFit((float(od_center[0]), float(od_center[1])), 1.0 / (4.0 * a), phi, cost, it)


def locate_fovea(
    fit: ParabolaFit, od_diameter: float, image_shape: tuple[int, int] | None = None
) -> FoveaEstimate:
    """Point ``2.5 D`` from the vertex along the axis, toward the opening side."""
    if od_diameter <= 0:
        raise InvalidInputError("optic disc diameter must be positive")
    sign = 1.0 if fit.p > 0 else -1.0
    x, y = np.asarray(fit.vertex) + sign * FOVEA_DISTANCE * od_diameter * fit.axis
    clipped = False
    if image_shape is not None:
        h, w = image_shape[:2]
        cx, cy = min(max(x, 0.0), w - 1.0), min(max(y, 0.0), h - 1.0)
        clipped = (cx, cy) != (x, y)
        x, y = cx, cy
    return FoveaEstimate(float(x), float(y), clipped)


def healthy_macula_template(size: int = 64, depth: float = 0.5, spread: float = 0.3) -> np.ndarray:
    """Synthetic healthy macula: a smooth radial darkening toward the centre."""
    r = (np.arange(size) - (size - 1) / 2.0) / size
    rr = r[:, None] ** 2 + r[None, :] ** 2
    return 1.0 - depth * np.exp(-rr / (2.0 * spread**2))


def _standardize(a: np.ndarray) -> np.ndarray:
    sd = a.std()
    return (a - a.mean()) / sd if sd > 0 else np.zeros_like(a)


def macula_window(fovea: tuple[float, float], od_diameter: float) -> Rect:
    side = MACULA_WINDOW * od_diameter
    x0 = int(round(fovea[0] - side / 2.0))
    y0 = int(round(fovea[1] - side / 2.0))
    s = max(1, int(round(side)))
    return Rect(x0, y0, x0 + s, y0 + s)


def assess_macula(
    img: np.ndarray,
    fovea: tuple[float, float],
    od_diameter: float,
    template: np.ndarray,
    threshold: float = 1.0,
) -> MaculaAssessment:
    """Compare the 1.5D x 1.5D window at the fovea against a healthy template.

    Both are standardised to zero mean and unit variance before taking the
    mean squared difference, so global gain and bias do not matter.
    """
    template = np.asarray(template, dtype=np.float64)
    if template.size == 0:
        raise InvalidInputError("template is empty")
    if template.ndim == 3:
        template = to_grayscale(template)
    img = np.asarray(img, dtype=np.float64)
    gray = to_grayscale(img) if img.ndim == 3 else img
    full = macula_window(fovea, od_diameter)
    win = full.clip(gray.shape[1], gray.shape[0])
    if win.empty:
        raise InvalidInputError("macula window lies entirely outside the image")
    crop = gray[win.y0 : win.y1, win.x0 : win.x1]
    ref = resize_bilinear(template, full.width, full.height)
    ref = ref[win.y0 - full.y0 : win.y1 - full.y0, win.x0 - full.x0 : win.x1 - full.x0]
    err = float(np.mean((_standardize(crop) - _standardize(ref)) ** 2))
    return MaculaAssessment((float(fovea[0]), float(fovea[1])), win, err, err > threshold)
