"""End-to-end optic disc / fovea pipeline: training, detection, evaluation, timing.

Detection order: saliency -> ranked candidate regions -> window validation
(first accepted region wins) -> vessel map -> main-course points -> parabola
-> fovea -> macula check.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from retinal_landmarks import classifier, descriptors, encoding, saliency, topicmodel, vasculature
from retinal_landmarks.classifier import CLASS_NAMES, NeighborSet, ValidationVerdict
from retinal_landmarks.encoding import Codebook
from retinal_landmarks.errors import FitError, InvalidInputError
from retinal_landmarks.imaging import load_image, resize_bilinear, rgb_to_lab, save_map, to_grayscale
from retinal_landmarks.topicmodel import PlsaModel

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
CODEBOOK_FILE = "codebook.flcb"
MODEL_FILE = "plsa.flpl"
NEIGHBORS_FILE = "neighbors.flkn"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".ppm"}

EXIT_OK, EXIT_USAGE, EXIT_NOT_FOUND, EXIT_IO = 0, 1, 2, 3


@dataclass
class PipelineConfig:
    vocab_size: int = 113
    n_topics: int = 15
    knn_k: int = 9
    fuzzy_m: float = 2.0
    window_h: int = 122
    window_w: int = 112
    tau: float = 0.5
    retention_q: float = 0.35
    llc_k: int = 5
    seed: int = 0
    plsa_max_iter: int = 500
    plsa_tol: float = 1e-6
    kmeans_max_iter: int = 100
    scale_divisors: tuple[int, ...] = (2, 4, 8)
    fov_margin: float = 0.03
    mask_radius: float = 0.005
    max_candidates: int = 25
    od_min_frac: float = 0.06
    od_max_frac: float = 0.25
    macula_threshold: float = 1.0
    template: str = ""
    workers: int = 1

    _RANGES = {
        "vocab_size": (encoding.MIN_WORDS, encoding.MAX_WORDS),
        "n_topics": (1, 200),
        "knn_k": (1, 1000),
        "window_h": (16, 4096),
        "window_w": (16, 4096),
        "tau": (0.0, 1.0),
        "retention_q": (1e-9, 1.0),
        "llc_k": (1, 64),
        "plsa_max_iter": (1, 100_000),
        "plsa_tol": (0.0, 1.0),
        "kmeans_max_iter": (1, 10_000),
        "fov_margin": (0.0, 0.25),
        "mask_radius": (0.0, 0.05),
        "max_candidates": (1, 10_000),
        "od_min_frac": (0.0, 1.0),
        "od_max_frac": (0.0, 1.0),
        "macula_threshold": (0.0, 100.0),
        "workers": (1, 256),
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name, (lo, hi) in self._RANGES.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise InvalidInputError(f"config {name}={v} outside [{lo}, {hi}]")
        if self.fuzzy_m <= 1.0:
            raise InvalidInputError("config fuzzy_m must exceed 1")
        if self.llc_k > self.vocab_size:
            raise InvalidInputError("config llc_k cannot exceed vocab_size")
        if self.od_min_frac > self.od_max_frac:
            raise InvalidInputError("config od_min_frac exceeds od_max_frac")
        if not self.scale_divisors or any(d < 2 or d > 8 for d in self.scale_divisors):
            raise InvalidInputError("scale divisors must lie in [2, 8]")

    @property
    def window(self) -> tuple[int, int]:
        return (self.window_h, self.window_w)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def _coerce(name: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    if name not in fields:
        raise InvalidInputError(f"unknown config key {name!r}")
    default = getattr(PipelineConfig, name, None) if name != "scale_divisors" else (2, 4, 8)
    raw = raw.strip()
    try:
        if name == "scale_divisors":
            return tuple(int(v) for v in raw.replace(";", ",").split(",") if v.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise InvalidInputError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise InvalidInputError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def load_config(path: str | Path | None = None, overrides=None) -> PipelineConfig:
    """Read a ``key = value`` file (``#`` comments); ``overrides`` win."""
    values = {}
    if path:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = _coerce(key.strip(), value)
    values.update(overrides or {})
    return PipelineConfig(**values)


@dataclass
class Artifacts:
    codebook: Codebook
    model: PlsaModel
    neighbors: NeighborSet

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.codebook.save(out / CODEBOOK_FILE)
        self.model.save(out / MODEL_FILE)
        self.neighbors.save(out / NEIGHBORS_FILE)

    @classmethod
    def load(cls, model_dir: str | Path) -> "Artifacts":
        d = Path(model_dir)
        missing = [n for n in (CODEBOOK_FILE, MODEL_FILE, NEIGHBORS_FILE) if not (d / n).is_file()]
        if missing:
            raise FileNotFoundError(f"{d}: missing trained artifacts {', '.join(missing)}")
        return cls(Codebook.load(d / CODEBOOK_FILE), PlsaModel.load(d / MODEL_FILE), NeighborSet.load(d / NEIGHBORS_FILE))


# ---------------------------------------------------------------- detection


def field_of_view(img: np.ndarray) -> np.ndarray:
    """Largest bright region of the red channel (Otsu threshold), holes filled."""
    red = img[..., 0] if img.ndim == 3 else img
    red = cv2.GaussianBlur(red.astype(np.float32), (0, 0), 2.0)
    if float(red.max()) - float(red.min()) < 1e-6:
        return np.full(red.shape, float(red.max()) > 0.02)
    fov = red > threshold_otsu(red)
    labels, n = ndimage.label(fov)
    if n > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        fov = labels == sizes.argmax()
    return ndimage.binary_fill_holes(fov)


def _disk(radius: int) -> np.ndarray:
    return cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * radius + 1, 2 * radius + 1))


@dataclass
class CandidateSearch:
    candidates: list[saliency.CandidateRegion]
    smap: saliency.SaliencyMap
    mask: np.ndarray
    fov: np.ndarray


def find_candidates(img: np.ndarray, cfg: PipelineConfig) -> CandidateSearch:
    """Saliency, z-score mask inside the field of view, cleaned components."""
    h, w = img.shape[:2]
    fov = field_of_view(img)
    filled = img.copy()
    if fov.any():
        # outside-field pixels take the mean field colour so the dark surround is not salient
        filled[~fov] = img[fov].mean(axis=0)
    lab = rgb_to_lab(filled)
    scales = [max(1, w // d) for d in cfg.scale_divisors]
    smap = saliency.multiscale_saliency(lab, scales)
    margin = int(round(cfg.fov_margin * w))
    inner = fov
    if margin > 0:
        inner = cv2.erode(
            fov.astype(np.uint8), _disk(margin), borderType=cv2.BORDER_CONSTANT, borderValue=0
        ).astype(bool)
    interest = saliency.segment_interest(smap, valid=inner)
    mask = interest.mask.astype(np.uint8)
    r = int(round(cfg.mask_radius * w))
    if r > 0:
        # bridge vessels crossing a blob, then strip vessel-width strands
        mask = cv2.morphologyEx(mask, cv2.MORPH_CLOSE, _disk(r))
        mask = cv2.morphologyEx(mask, cv2.MORPH_OPEN, _disk(r))
    mask = mask.astype(bool) & inner
    candidates = saliency.extract_candidates(mask, smap, cfg.window)
    return CandidateSearch(candidates[: cfg.max_candidates], smap, mask, fov)


def od_diameter_from_area(area: float, width: int, cfg: PipelineConfig) -> float:
    d = math.sqrt(4.0 * area / math.pi)
    return float(min(max(d, cfg.od_min_frac * width), cfg.od_max_frac * width))


def refine_disc(
    img: np.ndarray, fov: np.ndarray, centre: tuple[float, float], cfg: PipelineConfig
) -> tuple[tuple[float, float], float]:
    """Re-centre the disc on the bright blob around ``centre`` and measure its diameter.

    Inside a square of half-side 0.15 W the luminance is closed (erasing dark
    vessels crossing the disc), blurred and Otsu-thresholded within the field of
    view.  The blob under (or nearest to) ``centre`` is hole-filled; its centroid
    and equivalent-circle diameter are returned, the latter clamped to
    ``[od_min_frac, od_max_frac] * W``.
    """
    h, w = img.shape[:2]
    half = max(8, int(0.15 * w))
    cx, cy = int(round(centre[0])), int(round(centre[1]))
    x0, y0 = max(0, cx - half), max(0, cy - half)
    x1, y1 = min(w, cx + half), min(h, cy + half)
    lum = rgb_to_lab(img[y0:y1, x0:x1]).L.astype(np.float32)
    inside = fov[y0:y1, x0:x1]
    r = max(1, int(round(0.01 * w)))
    lum = cv2.GaussianBlur(cv2.morphologyEx(lum, cv2.MORPH_CLOSE, _disk(r)), (0, 0), 2.0)
    vals = lum[inside]
    if vals.size == 0 or float(vals.max() - vals.min()) < 1e-6:
        return (float(centre[0]), float(centre[1])), float(cfg.od_min_frac * w)
    labels, _ = ndimage.label((lum > threshold_otsu(vals)) & inside)
    lx = min(max(cx - x0, 0), x1 - x0 - 1)
    ly = min(max(cy - y0, 0), y1 - y0 - 1)
    label = labels[ly, lx]
    if label == 0:
        _, (iy, ix) = ndimage.distance_transform_edt(labels == 0, return_indices=True)
        label = labels[iy[ly, lx], ix[ly, lx]]
    if label == 0:
        return (float(centre[0]), float(centre[1])), od_diameter_from_area(0.0, w, cfg)
    blob = ndimage.binary_fill_holes(labels == label)
    ys, xs = np.nonzero(blob)
    return (float(xs.mean() + x0), float(ys.mean() + y0)), od_diameter_from_area(float(blob.sum()), w, cfg)


@dataclass
class OdResult:
    found: bool
    center: tuple[float, float] | None
    diameter: float | None
    score: float
    verdict: ValidationVerdict | None
    candidate_rank: int | None
    candidates_checked: int


def detect_optic_disc(
    img: np.ndarray, artifacts: Artifacts, cfg: PipelineConfig, search: CandidateSearch | None = None
) -> OdResult:
    search = search or find_candidates(img, cfg)
    gray = to_grayscale(img)
    best_rejected = 0.0
    for rank, region in enumerate(search.candidates):
        verdict = classifier.validate_candidate(
            region, gray, artifacts.codebook, artifacts.model, artifacts.neighbors,
            cfg.knn_k, cfg.fuzzy_m, cfg.tau, cfg.llc_k,
        )
        if verdict.is_optic_disc:
            center, d = refine_disc(img, search.fov, region.centroid, cfg)
            return OdResult(True, center, d, verdict.aggregate_od_score, verdict, rank, rank + 1)
        best_rejected = max(best_rejected, verdict.aggregate_od_score)
    return OdResult(False, None, None, best_rejected, None, None, len(search.candidates))


@dataclass
class LandmarkReport:
    image: str
    width: int
    height: int
    od_found: bool
    od_center: list[float] | None = None
    od_diameter: float | None = None
    od_score: float = 0.0
    od_candidate_rank: int | None = None
    od_candidates_checked: int = 0
    od_window: list[int] | None = None
    od_memberships: list[float] | None = None
    fovea: list[float] | None = None
    fovea_flags: list[str] = field(default_factory=list)
    parabola: dict | None = None
    main_course_points: int = 0
    vessel_source: str | None = None
    macula: dict | None = None
    timings_ms: dict[str, float] = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not timings:
            d.pop("timings_ms")
        return {"schema": REPORT_SCHEMA, **d}

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=True)


def _r(x: float, nd: int = 3) -> float:
    return float(round(float(x), nd))


def detect(
    image,
    cfg: PipelineConfig,
    artifacts: Artifacts,
    vessel_map: np.ndarray | None = None,
    template: np.ndarray | None = None,
    image_id: str | None = None,
    dump_dir: str | Path | None = None,
) -> LandmarkReport:
    """Run the full pipeline on an image path or an ``(H, W, 3)`` float array.

    With ``dump_dir`` the per-scale saliency maps, the summed map, the
    interest mask and the main-course points are written there for debugging.
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    if isinstance(image, (str, Path)):
        image_id = image_id or Path(image).name
        img = load_image(image)
    else:
        img = np.asarray(image, dtype=np.float64)
        image_id = image_id or "<array>"
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError("detect expects an RGB image")
    h, w = img.shape[:2]
    timings["load"] = (time.perf_counter() - t0) * 1e3

    t = time.perf_counter()
    search = find_candidates(img, cfg)
    timings["saliency"] = (time.perf_counter() - t) * 1e3
    dump = Path(dump_dir) if dump_dir is not None else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
        for scale, m in zip(search.smap.scales_used, search.smap.per_scale):
            save_map(dump / f"saliency_{scale}.png", m)
        save_map(dump / "saliency.png", search.smap.values)
        save_map(dump / "interest_mask.png", search.mask)
    t = time.perf_counter()
    od = detect_optic_disc(img, artifacts, cfg, search)
    timings["validation"] = (time.perf_counter() - t) * 1e3

    report = LandmarkReport(image_id, w, h, od.found, od_score=_r(od.score, 6), od_candidates_checked=od.candidates_checked)
    report.timings_ms = timings
    if not od.found:
        report.fovea_flags.append("od-not-found")
        return report
    report.od_center = [_r(od.center[0]), _r(od.center[1])]
    report.od_diameter = _r(od.diameter)
    report.od_candidate_rank = od.candidate_rank
    report.od_window = od.verdict.best_window.as_list() if od.verdict.best_window else None
    report.od_memberships = [_r(v, 6) for v in od.verdict.class_memberships]

    t = time.perf_counter()
    if vessel_map is not None:
        vmap = vasculature.vessel_map_from_array(vessel_map)
        if vmap.binary.shape != (h, w):
            raise InvalidInputError("vessel map dimensions differ from the image")
    else:
        vmap = vasculature.baseline_segment_vessels(img)
        vmap.binary &= search.fov
    report.vessel_source = vmap.source
    skel = vasculature.skeletonize(vmap)
    dist = vasculature.distance_transform(vmap)
    course = vasculature.extract_main_course(skel, dist, cfg.retention_q)
    report.main_course_points = len(course)
    if dump is not None:
        course.to_csv(dump / "main_course.csv")
    timings["vessels"] = (time.perf_counter() - t) * 1e3

    t = time.perf_counter()
    try:
        fit = vasculature.fit_parabola(course, od.center)
    except (FitError, InvalidInputError) as exc:
        report.fovea_flags.append("parabola-fit-failed")
        log.warning("%s: parabola fit failed: %s", image_id, exc)
        timings["fovea"] = (time.perf_counter() - t) * 1e3
        return report
    fovea = vasculature.locate_fovea(fit, od.diameter, (h, w))
    if fovea.clipped:
        report.fovea_flags.append("fovea-clipped")
    report.parabola = {"vertex": [_r(v) for v in fit.vertex], "p": _r(fit.p, 6), "phi": _r(fit.phi, 6), "rss": _r(fit.rss)}
    report.fovea = [_r(fovea.x), _r(fovea.y)]
    timings["fovea"] = (time.perf_counter() - t) * 1e3

    t = time.perf_counter()
    tpl = template if template is not None else default_template(cfg)
    try:
        mac = vasculature.assess_macula(img, fovea.point, od.diameter, tpl, cfg.macula_threshold)
        report.macula = {
            "window": mac.window.as_list(),
            "template_error": _r(mac.template_error, 6),
            "suspicious": bool(mac.suspicious),
        }
    except InvalidInputError:
        report.fovea_flags.append("macula-outside-image")
    timings["macula"] = (time.perf_counter() - t) * 1e3
    return report


def default_template(cfg: PipelineConfig) -> np.ndarray:
    if cfg.template:
        return to_grayscale(load_image(cfg.template))
    return vasculature.healthy_macula_template()


# ---------------------------------------------------------------- training


def _window_blocks(crop: np.ndarray) -> np.ndarray:
    gray = to_grayscale(crop) if crop.ndim == 3 else np.asarray(crop, dtype=np.float64)
    h, w = descriptors.WINDOW_SHAPE
    if gray.shape != (h, w):
        gray = resize_bilinear(gray, w, h)
    return descriptors.hog(gray).blocks()


def load_training_crops(crop_dir: str | Path) -> tuple[list[np.ndarray], np.ndarray]:
    """Read ``crop_dir/<class-name>/*`` for the six fixed class names."""
    root = Path(crop_dir)
    crops, labels = [], []
    for idx, name in enumerate(CLASS_NAMES):
        sub = root / name
        if not sub.is_dir():
            raise InvalidInputError(f"training directory lacks class folder {name!r}")
        files = sorted(p for p in sub.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise InvalidInputError(f"class folder {name!r} has no images")
        for f in files:
            crops.append(load_image(f))
            labels.append(idx)
    return crops, np.asarray(labels)


def train_from_crops(crops, labels, cfg: PipelineConfig, codebook: Codebook | None = None) -> Artifacts:
    """HOG -> codebook -> word histograms -> pLSA -> labelled topic vectors."""
    labels = np.asarray(labels)
    if len(crops) == 0 or len(crops) != len(labels):
        raise InvalidInputError("need one label per training crop")
    blocks = [_window_blocks(c) for c in crops]
    if codebook is None:
        codebook = encoding.learn_codebook(
            np.vstack(blocks), cfg.vocab_size, cfg.seed, max_iter=cfg.kmeans_max_iter
        )
    counts = np.vstack([encoding.encode_window(b.ravel(), codebook, cfg.llc_k).counts for b in blocks])
    model = topicmodel.train_plsa(counts, cfg.n_topics, cfg.seed, cfg.plsa_max_iter, cfg.plsa_tol)
    points = np.vstack([topicmodel.fold_in(c, model) for c in counts])
    if cfg.knn_k > len(points):
        raise InvalidInputError(f"knn_k={cfg.knn_k} exceeds the {len(points)} training crops")
    return Artifacts(codebook, model, NeighborSet.from_labels(points, labels))


def train(crop_dir: str | Path, cfg: PipelineConfig, out_dir: str | Path | None = None) -> Artifacts:
    crops, labels = load_training_crops(crop_dir)
    artifacts = train_from_crops(crops, labels, cfg)
    if out_dir is not None:
        artifacts.save(out_dir)
    return artifacts


def candidate_centres(cfg: PipelineConfig):
    """Callable giving saliency candidate centroids; used to mine hard negatives."""

    def centres(img):
        return [r.centroid for r in find_candidates(img, cfg).candidates]

    return centres


# ---------------------------------------------------------------- evaluation


@dataclass
class Annotation:
    image: str
    od_x: float | None
    od_y: float | None
    od_r: float | None
    fovea_x: float | None
    fovea_y: float | None


def _opt_float(v: str | None) -> float | None:
    v = (v or "").strip()
    return float(v) if v else None


def read_annotations(path: str | Path) -> list[Annotation]:
    """CSV with header ``image,od_x,od_y,od_r,fovea_x,fovea_y``; blanks mean unknown."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "image" not in reader.fieldnames:
            raise InvalidInputError(f"{path}: annotation CSV needs an 'image' column")
        for row in reader:
            out.append(
                Annotation(
                    row["image"].strip(),
                    _opt_float(row.get("od_x")),
                    _opt_float(row.get("od_y")),
                    _opt_float(row.get("od_r")),
                    _opt_float(row.get("fovea_x")),
                    _opt_float(row.get("fovea_y")),
                )
            )
    return out


@dataclass
class ImageScore:
    image: str
    od_correct: bool | None
    fovea_correct: bool | None
    od_error: float | None
    fovea_error: float | None


def score_prediction(report: LandmarkReport | dict, truth: Annotation, cfg: PipelineConfig) -> ImageScore:
    """OD is correct within one true radius (or half the clamped predicted D
    when no radius is annotated); the fovea within one D."""
    r = report.to_dict() if isinstance(report, LandmarkReport) else report
    od_ok = fov_ok = None
    od_err = fov_err = None
    width = r.get("width") or 1
    if truth.od_x is not None and truth.od_y is not None:
        if r.get("od_center"):
            od_err = math.hypot(r["od_center"][0] - truth.od_x, r["od_center"][1] - truth.od_y)
            if truth.od_r:
                tol = truth.od_r
            else:
                d = r.get("od_diameter") or cfg.od_min_frac * width
                tol = 0.5 * min(max(d, cfg.od_min_frac * width), cfg.od_max_frac * width)
            od_ok = od_err <= tol
        else:
            od_ok = False
    if truth.fovea_x is not None and truth.fovea_y is not None:
        if r.get("fovea"):
            fov_err = math.hypot(r["fovea"][0] - truth.fovea_x, r["fovea"][1] - truth.fovea_y)
            d = 2.0 * truth.od_r if truth.od_r else (r.get("od_diameter") or cfg.od_min_frac * width)
            fov_ok = fov_err <= d
        else:
            fov_ok = False
    return ImageScore(truth.image, od_ok, fov_ok, od_err, fov_err)


def summarize(scores: list[ImageScore], dataset: str, resolution: str = "", skipped: int = 0) -> dict:
    od = [s.od_correct for s in scores if s.od_correct is not None]
    fv = [s.fovea_correct for s in scores if s.fovea_correct is not None]
    return {
        "dataset": dataset,
        "images": len(scores),
        "resolution": resolution,
        "od_accuracy": 100.0 * sum(od) / len(od) if od else None,
        "fovea_accuracy": 100.0 * sum(fv) / len(fv) if fv else None,
        "skipped": skipped,
    }


def _detect_job(args):
    path, cfg, model_dir, vessel_dir = args
    artifacts = Artifacts.load(model_dir)
    vmap = _external_vessel_map(vessel_dir, path)
    return detect(path, cfg, artifacts, vessel_map=vmap).to_dict(timings=False)


def _external_vessel_map(vessel_dir, image_path):
    if not vessel_dir:
        return None
    candidate = Path(vessel_dir) / (Path(image_path).stem + ".png")
    return load_image(candidate, mode="L") if candidate.is_file() else None


def evaluate(
    dataset_dir: str | Path,
    annotations: str | Path,
    cfg: PipelineConfig,
    artifacts: Artifacts | None = None,
    model_dir: str | Path | None = None,
    vessel_dir: str | Path | None = None,
    reports_dir: str | Path | None = None,
) -> tuple[dict | None, list[ImageScore], list[dict]]:
    """Detect on every annotated image and score against the annotations.

    Returns the summary row (``None`` for an empty dataset), per-image scores
    and the raw reports, all ordered by image id.
    """
    root = Path(dataset_dir)
    truths = sorted(read_annotations(annotations), key=lambda a: a.image)
    present, skipped = [], 0
    for a in truths:
        if (root / a.image).is_file():
            present.append(a)
        else:
            skipped += 1
            log.warning("annotation for %s has no image; skipped", a.image)
    if not present:
        return None, [], []
    if artifacts is None and model_dir is None:
        raise InvalidInputError("evaluate needs trained artifacts or a model directory")
    if cfg.workers > 1 and model_dir is not None:
        jobs = [(str(root / a.image), cfg, str(model_dir), vessel_dir) for a in present]
        with ProcessPoolExecutor(cfg.workers) as pool:
            reports = list(pool.map(_detect_job, jobs))
    else:
        artifacts = artifacts or Artifacts.load(model_dir)
        reports = []
        for a in present:
            vmap = _external_vessel_map(vessel_dir, root / a.image)
            reports.append(detect(root / a.image, cfg, artifacts, vessel_map=vmap).to_dict(timings=False))
    if reports_dir is not None:
        out = Path(reports_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rep in reports:
            (out / (Path(rep["image"]).stem + ".json")).write_text(json.dumps(rep, indent=2, sort_keys=True))
    scores = [score_prediction(rep, a, cfg) for rep, a in zip(reports, present)]
    res = sorted({f"{rep['width']}x{rep['height']}" for rep in reports})
    return summarize(scores, root.name, ",".join(res), skipped), scores, reports


SUMMARY_FIELDS = ["dataset", "images", "resolution", "od_accuracy", "fovea_accuracy", "skipped"]


def write_summary_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in SUMMARY_FIELDS})


# ---------------------------------------------------------------- bench / sweep


def bench(image, cfg: PipelineConfig, artifacts: Artifacts | None = None, repeats: int = 3) -> dict:
    """Median wall time per stage over ``repeats`` runs (milliseconds)."""
    if repeats < 1:
        raise InvalidInputError("repeats must be >= 1")
    img = load_image(image) if isinstance(image, (str, Path)) else np.asarray(image, dtype=np.float64)
    samples: dict[str, list[float]] = {}
    for _ in range(repeats):
        if artifacts is None:
            t = time.perf_counter()
            find_candidates(img, cfg)
            stages = {"saliency": (time.perf_counter() - t) * 1e3}
        else:
            stages = dict(detect(img, cfg, artifacts).timings_ms)
        stages["total"] = sum(stages.values())
        for k, v in stages.items():
            samples.setdefault(k, []).append(v)
    return {
        "image_size": [int(img.shape[1]), int(img.shape[0])],
        "repeats": repeats,
        "median_ms": {k: statistics.median(v) for k, v in samples.items()},
        "reference_s": {"saliency": 1.1, "validation_max": 9.0, "total": 10.1},
    }


SWEEP_PARAMS = {"n_topics": "Z", "knn_k": "K", "vocab_size": "V"}


def crop_accuracy(artifacts: Artifacts, crops, labels, cfg: PipelineConfig) -> float:
    """Share of crops whose disc/non-disc decision (summed disc mass vs tau) is right."""
    correct = 0
    for crop, label in zip(crops, labels):
        blocks = _window_blocks(crop)
        hist = encoding.encode_window(blocks.ravel(), artifacts.codebook, cfg.llc_k)
        u = classifier.fuzzy_knn(topicmodel.fold_in(hist, artifacts.model), artifacts.neighbors, cfg.knn_k, cfg.fuzzy_m)
        is_od = u[: classifier.OD_CLASSES].sum() >= cfg.tau
        correct += is_od == (label < classifier.OD_CLASSES)
    return correct / len(crops) if len(crops) else float("nan")


def sweep(
    train_crops, train_labels, test_crops, test_labels, ranges: dict[str, list], cfg: PipelineConfig
) -> list[dict]:
    """One-at-a-time parameter sweeps; others stay at ``cfg`` values."""
    if not ranges or any(len(v) == 0 for v in ranges.values()):
        raise InvalidInputError("every sweep range needs at least one value")
    rows = []
    base_codebook = None
    for param, values in ranges.items():
        if param not in SWEEP_PARAMS:
            raise InvalidInputError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_PARAMS)}")
        for v in values:
            c = cfg.replace(**{param: type(getattr(cfg, param))(v)})
            codebook = None
            if param != "vocab_size":
                if base_codebook is None:
                    blocks = np.vstack([_window_blocks(x) for x in train_crops])
                    base_codebook = encoding.learn_codebook(blocks, cfg.vocab_size, cfg.seed, max_iter=cfg.kmeans_max_iter)
                codebook = base_codebook
            art = train_from_crops(train_crops, train_labels, c, codebook)
            rows.append({"param": param, "value": v, "accuracy": crop_accuracy(art, test_crops, test_labels, c)})
    return rows


def write_sweep_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["param", "value", "accuracy"])
        writer.writeheader()
        writer.writerows(rows)


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"param": r["param"], "value": type(getattr(PipelineConfig, r["param"]))(float(r["value"])), "accuracy": float(r["accuracy"])}
            for r in csv.DictReader(fh)
        ]
