"""Fuzzy k-nearest-neighbour classification of topic vectors and optic disc validation.

Six classes are used: the whole disc, four disc parts (the windows shifted
left, right, up and down off the disc centre) and everything else.  A region
is accepted as optic disc when some window puts at least ``tau`` of its
membership on the five disc classes combined, so a partly hidden disc can
still validate through one of its parts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from retinal_landmarks.descriptors import WINDOW_SHAPE, hog
from retinal_landmarks.encoding import Codebook, encode_window
from retinal_landmarks.errors import InvalidInputError
from retinal_landmarks.imaging import resize_bilinear, to_grayscale
from retinal_landmarks.saliency import CandidateRegion, Rect
from retinal_landmarks.topicmodel import PlsaModel, fold_in

CLASS_NAMES = ("od_whole", "od_part1", "od_part2", "od_part3", "od_part4", "non_od")
OD_CLASSES = 5
N_CLASSES = len(CLASS_NAMES)

NEIGHBORS_MAGIC = b"FLKN"
NEIGHBORS_VERSION = 1


@dataclass(frozen=True)
class NeighborSet:
    """Labelled training topic vectors: ``points`` (N, Z) and ``memberships`` (N, 6)."""

    points: np.ndarray
    memberships: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2 or self.memberships.shape != (len(self.points), N_CLASSES):
            raise InvalidInputError("neighbor points and memberships disagree in shape")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_labels(cls, points: np.ndarray, labels) -> "NeighborSet":
        labels = np.asarray(labels, dtype=np.intp)
        return cls(np.asarray(points, dtype=np.float64), np.eye(N_CLASSES)[labels])

    def save(self, path: str | Path) -> None:
        n, z = self.points.shape
        with open(path, "wb") as fh:
            fh.write(NEIGHBORS_MAGIC)
            fh.write(struct.pack("<IIII", NEIGHBORS_VERSION, n, z, N_CLASSES))
            fh.write(np.ascontiguousarray(self.points, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.memberships, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "NeighborSet":
        raw = Path(path).read_bytes()
        if raw[:4] != NEIGHBORS_MAGIC:
            raise InvalidInputError(f"{path}: not a neighbor file")
        version, n, z, c = struct.unpack_from("<IIII", raw, 4)
        if version != NEIGHBORS_VERSION or c != N_CLASSES:
            raise InvalidInputError(f"{path}: unsupported neighbor file")
        if len(raw) != 20 + 8 * n * (z + c):
            raise InvalidInputError(f"{path}: truncated neighbor file")
        pts = np.frombuffer(raw, "<f8", n * z, 20).reshape(n, z).astype(np.float64)
        mem = np.frombuffer(raw, "<f8", n * c, 20 + 8 * n * z).reshape(n, c).astype(np.float64)
        return cls(pts, mem)


def fuzzy_knn(query: np.ndarray, train: NeighborSet, k: int = 9, m: float = 2.0) -> np.ndarray:
    """Class memberships of ``query`` from its ``k`` nearest labelled points.

    Neighbours are weighted by ``1 / d^(2 / (m - 1))``.  If the query sits
    exactly on training points, their (averaged) membership rows are returned.
    """
    if m <= 1:
        raise InvalidInputError("fuzzifier m must exceed 1")
    if not 1 <= k <= len(train):
        raise InvalidInputError(f"k={k} must lie in [1, {len(train)}]")
    query = np.asarray(query, dtype=np.float64).ravel()
    dist = np.sqrt(((train.points - query) ** 2).sum(axis=1))
    nearest = np.argsort(dist, kind="stable")[:k]
    d = dist[nearest]
    rows = train.memberships[nearest]
    with np.errstate(divide="ignore", over="ignore"):
        w = d ** (-2.0 / (m - 1.0))
    exact = ~np.isfinite(w)
    if exact.any():
        u = rows[exact].mean(axis=0)
    else:
        u = (w[:, None] * rows).sum(axis=0) / w.sum()
    return u / u.sum()


def classify(query: np.ndarray, train: NeighborSet, k: int = 9, m: float = 2.0) -> int:
    """Index of the largest membership; ties go to the lowest class index."""
    return int(np.argmax(fuzzy_knn(query, train, k, m)))


@dataclass
class ValidationVerdict:
    is_optic_disc: bool
    best_window: Rect | None
    class_memberships: np.ndarray
    aggregate_od_score: float
    window_scores: list[float]


def window_topics(
    gray: np.ndarray, rect: Rect, cb: Codebook, model: PlsaModel, llc_k: int = 5
) -> np.ndarray:
    """Crop, resize to 122x112, HOG, bag-of-words, fold-in."""
    crop = gray[rect.y0 : rect.y1, rect.x0 : rect.x1]
    h, w = WINDOW_SHAPE
    desc = hog(resize_bilinear(crop, w, h))
    return fold_in(encode_window(desc, cb, llc_k), model)


def validate_candidate(
    region: CandidateRegion,
    image: np.ndarray,
    cb: Codebook,
    model: PlsaModel,
    train: NeighborSet,
    k: int = 9,
    m: float = 2.0,
    tau: float = 0.5,
    llc_k: int = 5,
) -> ValidationVerdict:
    image = np.asarray(image, dtype=np.float64)
    gray = to_grayscale(image) if image.ndim == 3 else image
    best = None
    scores = []
    for rect in region.windows:
        if rect.empty:
            continue
        u = fuzzy_knn(window_topics(gray, rect, cb, model, llc_k), train, k, m)
        score = float(u[:OD_CLASSES].sum())
        scores.append(score)
        # strict comparison keeps the earliest window on ties
        if best is None or score > best[2]:
            best = (rect, u, score)
    if best is None:
        return ValidationVerdict(False, None, np.zeros(N_CLASSES), 0.0, [])
    rect, u, score = best
    return ValidationVerdict(score >= tau, rect, u, score, scores)
