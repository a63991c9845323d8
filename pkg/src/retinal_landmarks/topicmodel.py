"""Probabilistic latent semantic analysis fitted by expectation maximisation.

The model factors the joint document/word distribution as
``P(d, w) = sum_z P(z) P(d|z) P(w|z)``.  Training alternates the usual
responsibility update with re-estimation of the three factor tables; unseen
documents are "folded in" by re-running EM over ``P(z|d)`` alone with
``P(w|z)`` frozen.
"""

from __future__ import annotations

import csv
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from retinal_landmarks.errors import InvalidInputError

log = logging.getLogger(__name__)

MODEL_MAGIC = b"FLPL"
MODEL_VERSION = 1


class UnseenVocabularyWarning(UserWarning):
    """The folded-in document only uses words with zero probability under every topic."""


@dataclass
class PlsaModel:
    p_z: np.ndarray  # (Z,)
    p_w_given_z: np.ndarray  # (Z, W)
    p_d_given_z: np.ndarray  # (Z, N)
    log_likelihood_trace: list[float] = field(default_factory=list)

    @property
    def n_topics(self) -> int:
        return self.p_z.shape[0]

    @property
    def n_words(self) -> int:
        return self.p_w_given_z.shape[1]

    @property
    def n_docs(self) -> int:
        return self.p_d_given_z.shape[1]

    def doc_topics(self) -> np.ndarray:
        """Training ``P(z|d)`` as an ``(N, Z)`` array."""
        joint = self.p_z[:, None] * self.p_d_given_z
        return _normalize_columns(joint).T

    def save(self, path: str | Path, trace_csv: bool = True) -> None:
        path = Path(path)
        z, w, n = self.n_topics, self.n_words, self.n_docs
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<IIIII", MODEL_VERSION, z, w, n, len(self.log_likelihood_trace)))
            for arr in (self.p_z, self.p_w_given_z, self.p_d_given_z, np.asarray(self.log_likelihood_trace)):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if trace_csv:
            with open(path.with_suffix(".trace.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["iteration", "log_likelihood"])
                for i, ll in enumerate(self.log_likelihood_trace, 1):
                    writer.writerow([i, repr(float(ll))])

    @classmethod
    def load(cls, path: str | Path) -> "PlsaModel":
        raw = Path(path).read_bytes()
        if raw[:4] != MODEL_MAGIC:
            raise InvalidInputError(f"{path}: not a pLSA model file")
        version, z, w, n, t = struct.unpack_from("<IIIII", raw, 4)
        if version != MODEL_VERSION:
            raise InvalidInputError(f"{path}: unsupported model version {version}")
        offset = 24
        sizes = [z, z * w, z * n, t]
        if len(raw) != offset + 8 * sum(sizes):
            raise InvalidInputError(f"{path}: truncated model file")
        parts = []
        for size in sizes:
            parts.append(np.frombuffer(raw, dtype="<f8", count=size, offset=offset).astype(np.float64))
            offset += 8 * size
        return cls(parts[0], parts[1].reshape(z, w), parts[2].reshape(z, n), parts[3].tolist())


def _normalize_rows(a: np.ndarray) -> np.ndarray:
    s = a.sum(axis=-1, keepdims=True)
    # a row with no mass carries no information: fall back to uniform
    return np.where(s > 0, a / np.where(s > 0, s, 1.0), 1.0 / a.shape[-1])


def _normalize_columns(a: np.ndarray) -> np.ndarray:
    return _normalize_rows(a.T).T


def _validate_counts(counts) -> np.ndarray:
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 2 or n.size == 0:
        raise InvalidInputError("corpus must be a nonempty documents x words matrix")
    if np.any(n < 0) or not np.all(np.isfinite(n)):
        raise InvalidInputError("word counts must be finite and nonnegative")
    if np.any(n.sum(axis=1) <= 0):
        raise InvalidInputError("every document needs at least one word")
    return n


def log_likelihood(counts: np.ndarray, model: PlsaModel) -> float:
    joint = np.einsum("z,zd,zw->dw", model.p_z, model.p_d_given_z, model.p_w_given_z)
    used = counts > 0
    return float((counts[used] * np.log(joint[used])).sum())


def _m_step(n: np.ndarray, post: np.ndarray):
    weighted = post * n[None, :, :]  # (Z, D, W)
    per_topic_word = weighted.sum(axis=1)
    per_topic_doc = weighted.sum(axis=2)
    p_w_z = _normalize_rows(per_topic_word)
    p_d_z = _normalize_rows(per_topic_doc)
    p_z = per_topic_word.sum(axis=1) / n.sum()
    return p_z, p_d_z, p_w_z


def _e_step(p_z, p_d_z, p_w_z):
    joint = p_z[:, None, None] * p_d_z[:, :, None] * p_w_z[:, None, :]
    total = joint.sum(axis=0, keepdims=True)
    z = joint.shape[0]
    return np.where(total > 0, joint / np.where(total > 0, total, 1.0), 1.0 / z)


def train_plsa(
    counts,
    n_topics: int = 15,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
    init: np.ndarray | None = None,
) -> PlsaModel:
    """Fit pLSA to an ``(N, W)`` document-word count matrix.

    Responsibilities ``P(z|d, w)`` start from a seeded uniform draw (or
    ``init``, shape ``(Z, N, W)``).  Iteration stops once the relative
    log-likelihood gain drops below ``tol`` or after ``max_iter`` rounds.
    """
    n = _validate_counts(counts)
    if n_topics < 1:
        raise InvalidInputError("n_topics must be >= 1")
    docs, words = n.shape
    if init is None:
        post = np.random.default_rng(seed).random((n_topics, docs, words))
    else:
        post = np.array(init, dtype=np.float64)
        if post.shape != (n_topics, docs, words):
            raise InvalidInputError(f"init must have shape {(n_topics, docs, words)}")
    post = post / post.sum(axis=0, keepdims=True)
    p_z, p_d_z, p_w_z = _m_step(n, post)
    model = PlsaModel(p_z, p_w_z, p_d_z)
    trace = [log_likelihood(n, model)]
    for _ in range(max_iter):
        post = _e_step(p_z, p_d_z, p_w_z)
        p_z, p_d_z, p_w_z = _m_step(n, post)
        model = PlsaModel(p_z, p_w_z, p_d_z)
        ll = log_likelihood(n, model)
        prev = trace[-1]
        trace.append(ll)
        if abs(ll - prev) <= tol * abs(prev):
            break
    model.log_likelihood_trace = trace
    log.debug("pLSA: %d topics, %d iterations, final log-likelihood %.6f", n_topics, len(trace) - 1, trace[-1])
    return model


def fold_in(doc, model: PlsaModel, max_iter: int = 200, tol: float = 1e-10) -> np.ndarray:
    """Estimate ``P(z|d)`` for an unseen document with ``P(w|z)`` held fixed."""
    counts = np.asarray(getattr(doc, "counts", doc), dtype=np.float64).ravel()
    if counts.shape[0] != model.n_words:
        raise InvalidInputError(f"document has {counts.shape[0]} words, model has {model.n_words}")
    if counts.sum() <= 0 or np.any(counts < 0):
        raise InvalidInputError("document must have positive total count")
    z = model.n_topics
    known = model.p_w_given_z.sum(axis=0) > 0
    counts = np.where(known, counts, 0.0)
    if counts.sum() <= 0:
        warnings.warn("document uses only unseen words; returning uniform topics", UnseenVocabularyWarning)
        return np.full(z, 1.0 / z)
    theta = np.full(z, 1.0 / z)
    beta = model.p_w_given_z
    for _ in range(max_iter):
        joint = theta[:, None] * beta
        post = joint / np.where(joint.sum(axis=0) > 0, joint.sum(axis=0), 1.0)
        new = (post * counts).sum(axis=1)
        new = new / new.sum()
        delta = np.abs(new - theta).sum()
        theta = new
        if delta < tol:
            break
    return theta
