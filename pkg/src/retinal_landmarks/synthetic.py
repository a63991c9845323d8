"""Procedural fundus-like images with known optic disc and fovea geometry.

The renderer draws a dark circular field of view, a bright optic disc, a
pair of thick vessel arcades that follow an analytic parabola with its vertex
at the disc centre, thinner radiating vessels, a darker macula ``2.5 D``
along the parabola axis and, optionally, bright and dark lesion blobs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from retinal_landmarks.classifier import CLASS_NAMES
from retinal_landmarks.descriptors import WINDOW_SHAPE
from retinal_landmarks.errors import InvalidInputError
from retinal_landmarks.imaging import resize_bilinear, save_image
from retinal_landmarks.vasculature import FOVEA_DISTANCE

DEFAULT_SIZE = (1500, 1152)  # width, height
SUPERSAMPLE = 4  # fixed-point bits for antialiased cv2 drawing

BACKGROUND = np.array([0.80, 0.40, 0.20])
DISC_COLOUR = np.array([1.00, 0.88, 0.62])
VESSEL_COLOUR = np.array([0.48, 0.10, 0.07])
EXUDATE_COLOUR = np.array([0.98, 0.86, 0.45])
HAEMORRHAGE_COLOUR = np.array([0.45, 0.08, 0.05])


@dataclass
class SyntheticTruth:
    image: str
    od_x: float
    od_y: float
    od_r: float
    fovea_x: float
    fovea_y: float
    p: float
    phi: float
    width: int
    height: int

    @property
    def od_diameter(self) -> float:
        return 2.0 * self.od_r


@dataclass
class SyntheticFundus:
    image: np.ndarray
    truth: SyntheticTruth
    arcade: np.ndarray  # (N, 2) centreline samples of the two main arcades
    lesions: list[tuple[float, float]]


def parabola_points(vertex, p: float, phi: float, xr: np.ndarray) -> np.ndarray:
    """Image-space points of ``y' = x'^2 / (4 p)`` for local abscissae ``xr``."""
    yr = xr**2 / (4.0 * p)
    c, s = math.cos(phi), math.sin(phi)
    return np.column_stack([vertex[0] + c * xr - s * yr, vertex[1] + s * xr + c * yr])


def _smooth_field(rng, shape, scale, amplitude):
    h, w = shape
    coarse = rng.normal(0.0, 1.0, (max(2, h // scale), max(2, w // scale)))
    coarse = cv2.GaussianBlur(coarse, (0, 0), 0.5)
    field = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    field /= max(1e-9, np.abs(field).max())
    return amplitude * field


def _draw_polyline(canvas, pts, thickness_start, thickness_end):
    n = len(pts)
    shift = SUPERSAMPLE
    fp = np.round(pts * (1 << shift)).astype(np.int64)
    for i in range(n - 1):
        t = i / max(1, n - 2)
        th = thickness_start + (thickness_end - thickness_start) * t
        cv2.line(
            canvas,
            (int(fp[i, 0]), int(fp[i, 1])),
            (int(fp[i + 1, 0]), int(fp[i + 1, 1])),
            1.0,
            max(1, int(round(th))),
            cv2.LINE_AA,
            shift,
        )


def _wiggly_path(rng, start, angle, length, step=6.0, curl=0.04):
    pts = [np.asarray(start, dtype=np.float64)]
    a = angle
    for _ in range(int(length / step)):
        a += rng.normal(0.0, curl)
        pts.append(pts[-1] + step * np.array([math.cos(a), math.sin(a)]))
    return np.array(pts)


def _blend(img, mask, colour, strength=1.0):
    m = np.clip(mask * strength, 0.0, 1.0)[..., None]
    return img * (1.0 - m) + colour[None, None, :] * m


def render_fundus(
    seed: int,
    size: tuple[int, int] = DEFAULT_SIZE,
    lesions: int | None = None,
    degenerated: bool = False,
    name: str | None = None,
) -> SyntheticFundus:
    rng = np.random.default_rng(seed)
    w, h = size
    unit = w / 1500.0
    cx, cy = w / 2.0, h / 2.0
    fov_r = 0.53 * h

    diameter = rng.uniform(150.0, 170.0) * unit
    side = 1.0 if rng.random() < 0.5 else -1.0
    theta = (0.0 if side > 0 else math.pi) + rng.uniform(-0.2, 0.2)
    axis = np.array([math.cos(theta), math.sin(theta)])
    od = np.array([cx, cy]) - 0.5 * FOVEA_DISTANCE * diameter * axis + rng.uniform(-30, 30, 2) * unit
    fovea = od + FOVEA_DISTANCE * diameter * axis
    phi = math.atan2(-axis[0], axis[1])
    p = rng.uniform(0.35, 0.5) * diameter

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rfov = np.hypot(xx - cx, yy - cy)
    fov = np.clip((fov_r - rfov) / 3.0, 0.0, 1.0)

    illum = 1.0 + _smooth_field(rng, (h, w), int(200 * unit) or 1, 0.08)
    vignette = 1.0 - 0.25 * (rfov / fov_r) ** 4
    img = BACKGROUND[None, None, :] * (illum * vignette)[..., None]
    img = img * (1.0 + rng.uniform(-0.05, 0.05, 3))[None, None, :]

    # macula: broad darkening with a darker pit at the fovea
    rm = np.hypot(xx - fovea[0], yy - fovea[1])
    dark = 0.28 * np.exp(-(rm**2) / (2 * (0.55 * diameter) ** 2)) + 0.12 * np.exp(-(rm**2) / (2 * (0.15 * diameter) ** 2))
    img = img * (1.0 - dark)[..., None]

    # optic disc with a brighter cup
    ro = np.hypot(xx - od[0], yy - od[1])
    disc = 1.0 / (1.0 + np.exp((ro - diameter / 2.0) / (2.0 * unit)))
    img = _blend(img, disc, DISC_COLOUR, 0.9)
    cup = 1.0 / (1.0 + np.exp((ro - 0.22 * diameter) / (3.0 * unit)))
    img = _blend(img, cup, np.array([1.0, 0.97, 0.85]), 0.6)

    vessels = np.zeros((h, w), np.float32)
    # main arcades follow the parabola exactly
    span = 1.1 * fov_r
    arcade_pts = []
    for sgn in (1.0, -1.0):
        xr = sgn * np.linspace(0.0, span, 400)
        pts = parabola_points(od, p, phi, xr)
        inside = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) < fov_r + 10
        pts = pts[: max(2, int(np.argmin(inside)) if not inside.all() else len(pts))]
        arcade_pts.append(pts)
        _draw_polyline(vessels, pts, 13.0 * unit, 6.0 * unit)
        # branches off the arcade
        for _ in range(rng.integers(4, 8)):
            i = int(rng.integers(len(pts) // 6, max(len(pts) // 6 + 1, len(pts) - 5)))
            tang = pts[min(i + 1, len(pts) - 1)] - pts[i - 1]
            base = math.atan2(tang[1], tang[0]) + rng.choice([-1, 1]) * rng.uniform(0.5, 1.1)
            path = _wiggly_path(rng, pts[i], base, rng.uniform(80, 260) * unit)
            _draw_polyline(vessels, path, 4.0 * unit, 2.0 * unit)
    # nasal vessels radiating away from the fovea
    for _ in range(rng.integers(3, 6)):
        ang = theta + math.pi + rng.uniform(-1.1, 1.1)
        path = _wiggly_path(rng, od, ang, rng.uniform(250, 450) * unit)
        _draw_polyline(vessels, path, 8.0 * unit, 3.0 * unit)
    # short radial stubs inside the disc
    for _ in range(rng.integers(3, 6)):
        ang = rng.uniform(0, 2 * math.pi)
        path = _wiggly_path(rng, od, ang, diameter * rng.uniform(0.5, 0.9), curl=0.1)
        _draw_polyline(vessels, path, 5.0 * unit, 3.0 * unit)
    vessels = cv2.GaussianBlur(vessels, (0, 0), 0.8 * unit)
    img = _blend(img, vessels.astype(np.float64), VESSEL_COLOUR, 0.85)

    n_lesions = int(rng.integers(0, 5)) if lesions is None else lesions
    blobs = {True: np.zeros((h, w), np.float32), False: np.zeros((h, w), np.float32)}
    lesion_centres = []
    for _ in range(n_lesions):
        for _attempt in range(50):
            pos = np.array([cx, cy]) + rng.uniform(-0.8, 0.8, 2) * fov_r
            if (
                np.hypot(*(pos - np.array([cx, cy]))) < 0.85 * fov_r
                and np.hypot(*(pos - od)) > 1.6 * diameter
                and np.hypot(*(pos - fovea)) > 0.6 * diameter
            ):
                break
        bright = bool(rng.random() < 0.6)
        lesion_centres.append((float(pos[0]), float(pos[1])))
        for _ in range(rng.integers(1, 6)):
            c = pos + rng.normal(0, 15 * unit, 2)
            r = rng.uniform(5, 22) * unit
            cv2.circle(blobs[bright], (int(c[0] * 16), int(c[1] * 16)), int(r * 16), 1.0, -1, cv2.LINE_AA, 4)
    for bright, blob in blobs.items():
        if blob.any():
            blob = cv2.GaussianBlur(blob, (0, 0), 1.5 * unit).astype(np.float64)
            img = _blend(img, blob, EXUDATE_COLOUR if bright else HAEMORRHAGE_COLOUR, 0.8)

    if degenerated:
        img = _blend(img, _lesion_disc(xx, yy, fovea, 0.3 * diameter), EXUDATE_COLOUR, 0.9)

    img = img + rng.normal(0.0, 0.01, img.shape)
    img = np.clip(img * fov[..., None], 0.0, 1.0)
    # store through 8-bit so in-memory and on-disk images agree
    img = np.round(img * 255.0) / 255.0
    truth = SyntheticTruth(
        name or f"synth_{seed:05d}.png",
        float(od[0]),
        float(od[1]),
        float(diameter / 2.0),
        float(fovea[0]),
        float(fovea[1]),
        float(p),
        float(phi),
        w,
        h,
    )
    return SyntheticFundus(img, truth, np.vstack(arcade_pts), lesion_centres)


def _lesion_disc(xx, yy, centre, radius):
    r = np.hypot(xx - centre[0], yy - centre[1])
    return 1.0 / (1.0 + np.exp((r - radius) / 2.0))


GT_FIELDS = ["image", "od_x", "od_y", "od_r", "fovea_x", "fovea_y"]


def write_ground_truth(path: str | Path, truths: list[SyntheticTruth]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GT_FIELDS + ["p", "phi"])
        for t in truths:
            d = asdict(t)
            writer.writerow([d[k] if k == "image" else repr(d[k]) for k in GT_FIELDS] + [repr(t.p), repr(t.phi)])


def generate_synthetic(
    seed: int,
    count: int,
    out_dir: str | Path,
    size: tuple[int, int] = DEFAULT_SIZE,
    degenerated: bool = False,
) -> list[SyntheticTruth]:
    """Write ``count`` images plus ``ground_truth.csv`` into ``out_dir``."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truths = []
    for i in range(count):
        fundus = render_fundus(seed * 100_003 + i, size, degenerated=degenerated, name=f"synth_{i + 1:03d}.png")
        save_image(out / fundus.truth.image, fundus.image)
        truths.append(fundus.truth)
    write_ground_truth(out / "ground_truth.csv", truths)
    return truths


def _crop(img, cx, cy, win_h, win_w):
    h, w = img.shape[:2]
    x0 = int(round(cx - win_w / 2))
    y0 = int(round(cy - win_h / 2))
    x0c, y0c = max(x0, 0), max(y0, 0)
    x1c, y1c = min(x0 + win_w, w), min(y0 + win_h, h)
    if x1c - x0c < 8 or y1c - y0c < 8:
        return None
    return resize_bilinear(img[y0c:y1c, x0c:x1c], WINDOW_SHAPE[1], WINDOW_SHAPE[0])


def training_crops(
    seed: int,
    per_class: int,
    size: tuple[int, int] = DEFAULT_SIZE,
    images: int | None = None,
    negative_centres=None,
) -> dict[str, list[np.ndarray]]:
    """Labelled 122x112 crops: whole disc, four shifted disc parts and background.

    Background crops are drawn in turn from lesion sites, from
    ``negative_centres(image)`` (e.g. false saliency candidates) when given,
    and from random field-of-view positions at least 1.5 D from the disc.
    """
    rng = np.random.default_rng(seed)
    wh, ww = WINDOW_SHAPE
    shifts = [(-(ww // 2), 0), (ww // 2, 0), (0, -(wh // 2)), (0, wh // 2)]
    n_images = images or max(4, per_class // 4)
    crops: dict[str, list[np.ndarray]] = {name: [] for name in CLASS_NAMES}
    negatives: list[np.ndarray] = []
    for i in range(n_images):
        f = render_fundus(seed * 7919 + 17 + i, size)
        t = f.truth
        per_image = -(-per_class // n_images)
        for _ in range(per_image):
            jitter = rng.uniform(-12, 12, 2)
            scale = 1.25 if rng.random() < 0.25 else 1.0
            c = _crop(f.image, t.od_x + jitter[0], t.od_y + jitter[1], int(wh * scale), int(ww * scale))
            if c is not None:
                crops["od_whole"].append(c)
            for j, (sx, sy) in enumerate(shifts):
                jit = rng.uniform(-12, 12, 2)
                c = _crop(f.image, t.od_x + sx + jit[0], t.od_y + sy + jit[1], wh, ww)
                if c is not None:
                    crops[CLASS_NAMES[1 + j]].append(c)
        sites = list(f.lesions)
        if negative_centres is not None:
            sites += [
                (x, y)
                for x, y in negative_centres(f.image)
                if math.hypot(x - t.od_x, y - t.od_y) >= 1.5 * t.od_diameter
            ]
        rng.shuffle(sites)
        for x, y in sites[:per_image]:
            c = _crop(f.image, x + rng.uniform(-10, 10), y + rng.uniform(-10, 10), wh, ww)
            if c is not None:
                negatives.append(c)
        for _ in range(per_image):
            c = _background_crop(rng, f, wh, ww)
            if c is not None:
                negatives.append(c)
    order = rng.permutation(len(negatives))
    crops["non_od"] = [negatives[i] for i in order]
    return {name: items[:per_class] for name, items in crops.items()}


def _background_crop(rng, f: SyntheticFundus, wh, ww):
    t = f.truth
    h, w = f.image.shape[:2]
    cx, cy = w / 2.0, h / 2.0
    fov_r = 0.53 * h
    for _ in range(200):
        r = fov_r * math.sqrt(rng.uniform(0.0, 1.05))
        a = rng.uniform(0, 2 * math.pi)
        x, y = cx + r * math.cos(a), cy + r * math.sin(a)
        if not (0 <= x < w and 0 <= y < h):
            continue
        if math.hypot(x - t.od_x, y - t.od_y) < 1.5 * t.od_diameter:
            continue
        return _crop(f.image, x, y, wh, ww)
    return None


def write_training_set(
    seed: int,
    per_class: int,
    out_dir: str | Path,
    size: tuple[int, int] = DEFAULT_SIZE,
    negative_centres=None,
) -> None:
    """Write crops as ``out_dir/<class-name>/NNNN.png``."""
    out = Path(out_dir)
    for name, items in training_crops(seed, per_class, size, negative_centres=negative_centres).items():
        (out / name).mkdir(parents=True, exist_ok=True)
        for i, crop in enumerate(items[:per_class]):
            save_image(out / name / f"{i:04d}.png", crop)
