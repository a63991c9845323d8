"""Visual vocabulary learning and locality-constrained linear coding (LLC).

Every 36-dim HOG block of a window is coded against the codebook and the
clipped codes are sum-pooled into a word histogram, which becomes the
window's "document" for the topic model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from retinal_landmarks.descriptors import BLOCK_DIM, HogDescriptor
from retinal_landmarks.errors import InvalidInputError

CODEBOOK_MAGIC = b"FLCB"
CODEBOOK_VERSION = 1
RIDGE = 1e-9
MIN_WORDS, MAX_WORDS = 16, 4096


@dataclass(frozen=True)
class Codebook:
    bases: np.ndarray  # (M, dim)
    sigma: float = 1.0
    lam: float = 1e-4

    def __post_init__(self):
        if self.bases.ndim != 2 or self.bases.shape[0] < 2:
            raise InvalidInputError("codebook needs at least two bases")
        if not np.all(np.isfinite(self.bases)):
            raise InvalidInputError("codebook bases must be finite")
        if pdist(self.bases).min() <= 1e-9:
            raise InvalidInputError("codebook bases must be pairwise distinct")

    @property
    def size(self) -> int:
        return self.bases.shape[0]

    @property
    def dim(self) -> int:
        return self.bases.shape[1]

    def save(self, path: str | Path) -> None:
        m, d = self.bases.shape
        with open(path, "wb") as fh:
            fh.write(CODEBOOK_MAGIC)
            fh.write(struct.pack("<III", CODEBOOK_VERSION, m, d))
            fh.write(np.ascontiguousarray(self.bases, dtype="<f8").tobytes())
            fh.write(struct.pack("<dd", self.sigma, self.lam))

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        raw = Path(path).read_bytes()
        if raw[:4] != CODEBOOK_MAGIC:
            raise InvalidInputError(f"{path}: not a codebook file")
        version, m, d = struct.unpack_from("<III", raw, 4)
        if version != CODEBOOK_VERSION:
            raise InvalidInputError(f"{path}: unsupported codebook version {version}")
        offset = 16
        expected = offset + 8 * m * d + 16
        if len(raw) != expected:
            raise InvalidInputError(f"{path}: truncated codebook ({len(raw)} != {expected} bytes)")
        bases = np.frombuffer(raw, dtype="<f8", count=m * d, offset=offset).reshape(m, d).astype(np.float64)
        sigma, lam = struct.unpack_from("<dd", raw, offset + 8 * m * d)
        return cls(bases, sigma, lam)


def _sq_dists(x: np.ndarray, centres: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centres.T + (centres * centres).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every remaining point coincides with a chosen centre
            idx = next(i for i in range(n) if i not in set(chosen))
        else:
            idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx : idx + 1]).ravel())
    return points[chosen].copy()


def learn_codebook(
    blocks: np.ndarray,
    size: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
    sigma: float = 1.0,
    lam: float = 1e-4,
) -> Codebook:
    """k-means (k-means++ seeding) over distinct block vectors."""
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim != 2:
        raise InvalidInputError("blocks must be a 2-D array")
    points, counts = np.unique(blocks, axis=0, return_counts=True)
    if len(points) < size:
        raise InvalidInputError(
            f"need at least {size} distinct blocks for the vocabulary, got {len(points)}"
        )
    if size < 2:
        raise InvalidInputError("vocabulary size must be >= 2")
    rng = np.random.default_rng(seed)
    centres = _kmeans_pp(points, size, rng)
    weights = counts.astype(np.float64)
    for _ in range(max_iter):
        assign = _sq_dists(points, centres).argmin(axis=1)
        sums = np.zeros_like(centres)
        np.add.at(sums, assign, points * weights[:, None])
        mass = np.bincount(assign, weights=weights, minlength=size)
        new = centres.copy()
        filled = mass > 0
        new[filled] = sums[filled] / mass[filled, None]
        empty = np.flatnonzero(~filled)
        if len(empty):
            # reseed empty clusters at the points worst served by the others
            worst = _sq_dists(points, new[filled]).min(axis=1).argsort()[::-1]
            new[empty] = points[worst[: len(empty)]]
        shift = np.sqrt(((new - centres) ** 2).sum(axis=1)).max()
        centres = new
        if shift < tol:
            break
    return Codebook(centres, sigma, lam)


def _constrained_ls(local: np.ndarray, x: np.ndarray, penalty: np.ndarray | None = None) -> np.ndarray:
    """Minimise ``|x - local.T c|^2 (+ c' diag(penalty) c)`` subject to ``sum(c) = 1``."""
    z = local - x
    exact = np.flatnonzero(~z.any(axis=1))
    if exact.size and penalty is None:
        # x coincides with a basis: the one-hot code reconstructs it exactly
        out = np.zeros(len(local))
        out[exact[0]] = 1.0
        return out
    cov = z @ z.T
    if penalty is not None:
        cov = cov + np.diag(penalty)
    k = len(cov)
    ones = np.ones(k)
    with np.errstate(divide="ignore", invalid="ignore"):
        singular = not np.linalg.cond(cov) <= 1e12
    if singular:
        tr = np.trace(cov)
        cov = cov + np.eye(k) * RIDGE * (tr if tr > 0 else 1.0)
    w = np.linalg.solve(cov, ones)
    return w / w.sum()


@dataclass(frozen=True)
class LlcCode:
    coefficients: np.ndarray


def llc_encode(x: np.ndarray, cb: Codebook, k: int = 5) -> LlcCode:
    """Approximate LLC: affine code over the ``k`` nearest bases."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if not 1 <= k <= cb.size:
        raise InvalidInputError(f"k must lie in [1, {cb.size}]")
    nearest = np.argsort(_sq_dists(x[None, :], cb.bases)[0], kind="stable")[:k]
    code = np.zeros(cb.size)
    code[nearest] = _constrained_ls(cb.bases[nearest], x)
    return LlcCode(code)


def llc_encode_exact(x: np.ndarray, cb: Codebook) -> LlcCode:
    """Full locality-penalised LLC over all bases, using ``cb.lam`` and ``cb.sigma``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    dist = np.sqrt(((cb.bases - x) ** 2).sum(axis=1))
    adaptor = np.exp(dist / cb.sigma)
    return LlcCode(_constrained_ls(cb.bases, x, cb.lam * adaptor**2))


def llc_encode_many(xs: np.ndarray, cb: Codebook, k: int = 5) -> np.ndarray:
    """Batch form of :func:`llc_encode`; returns an ``(N, M)`` code matrix."""
    xs = np.asarray(xs, dtype=np.float64)
    if not 1 <= k <= cb.size:
        raise InvalidInputError(f"k must lie in [1, {cb.size}]")
    nearest = np.argsort(_sq_dists(xs, cb.bases), axis=1, kind="stable")[:, :k]
    z = cb.bases[nearest] - xs[:, None, :]
    cov = z @ z.transpose(0, 2, 1)
    ones = np.ones(k)
    codes = np.zeros((len(xs), cb.size))
    with np.errstate(divide="ignore", invalid="ignore"):
        bad = ~(np.linalg.cond(cov) <= 1e12) if k > 1 else np.zeros(len(xs), dtype=bool)
    if bad.any():
        tr = np.trace(cov[bad], axis1=1, axis2=2)
        tr = np.where(tr > 0, tr, 1.0)
        cov[bad] += np.eye(k)[None] * (RIDGE * tr)[:, None, None]
    if k == 1:
        w = np.ones((len(xs), 1))
    else:
        w = np.linalg.solve(cov, np.broadcast_to(ones, (len(xs), k))[..., None])[..., 0]
        w = w / w.sum(axis=1, keepdims=True)
    hit = ~z.any(axis=2)
    rows = hit.any(axis=1)
    if rows.any():
        w[rows] = 0.0
        w[rows, hit[rows].argmax(axis=1)] = 1.0
    np.put_along_axis(codes, nearest, w, axis=1)
    return codes


@dataclass(frozen=True)
class BowHistogram:
    counts: np.ndarray

    @property
    def total(self) -> float:
        return float(self.counts.sum())


def encode_window(desc: HogDescriptor | np.ndarray, cb: Codebook, k: int = 5) -> BowHistogram:
    """Sum-pool clipped LLC codes of every block into a word histogram.

    Negative coefficients are clipped and each block's code is rescaled to
    unit mass, so every block contributes exactly one word occurrence and the
    histogram total equals the block count.
    """
    values = desc.values if isinstance(desc, HogDescriptor) else np.asarray(desc, dtype=np.float64)
    if values.size == 0 or values.size % BLOCK_DIM:
        raise InvalidInputError("descriptor must be a nonempty multiple of 36 values")
    codes = np.maximum(llc_encode_many(values.reshape(-1, BLOCK_DIM), cb, k), 0.0)
    # an affine code always has a positive entry, so the row sums are > 0
    codes /= codes.sum(axis=1, keepdims=True)
    return BowHistogram(codes.sum(axis=0))
