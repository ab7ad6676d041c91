"""Evaluation: Fréchet distance between embedding sets and NLDA face recognition.

The Fréchet distance is embedder-agnostic. Two embedders are built in (a
seeded random projection and a plain resize-and-flatten); externally computed
features, e.g. Inception-v3 pool features, can be read from ``EMB1`` files.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, MatrixError, NullSpaceEmpty, NumericalError, ShapeError

EMB_MAGIC = b"EMB1"
EMB_DTYPE = b"f32\x00"
EMB_HEADER = struct.Struct("<4s4sII")


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img[..., :3] @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


def resize_plane(plane: np.ndarray, size: int) -> np.ndarray:
    if plane.shape == (size, size):
        return plane.astype(np.float32)
    im = Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32), mode="F")
    return np.asarray(im.resize((size, size), Image.Resampling.BOX), dtype=np.float32)


class FlattenEmbedder:
    """Resize every channel to ``size x size`` and flatten."""

    def __init__(self, size: int = 16):
        self.size = size
        self.id = f"flatten-{size}"

    def __call__(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float32)
        if img.ndim == 2:
            img = img[..., None]
        planes = [resize_plane(img[..., c], self.size) for c in range(img.shape[-1])]
        return np.stack(planes, axis=-1).ravel().astype(np.float64)


class ProjectionEmbedder:
    """Grayscale, downscale, fixed Gaussian projection, tanh."""

    def __init__(self, dim: int = 64, size: int = 32, seed: int = 0):
        self.dim, self.size, self.seed = dim, size, seed
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((dim, size * size)) / np.sqrt(size * size)
        self.id = f"projection-d{dim}-s{size}-seed{seed}"

    def __call__(self, img: np.ndarray) -> np.ndarray:
        v = resize_plane(to_gray(img), self.size).ravel().astype(np.float64)
        return np.tanh(self.weights @ v)


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    embedder_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ShapeError(f"embeddings must be N x d, got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise DataError("embeddings contain non-finite values")


def embed_set(images: Sequence[np.ndarray], embedder: Callable[[np.ndarray], np.ndarray]) -> EmbeddingSet:
    if len(images) == 0:
        raise DataError("cannot embed an empty image list")
    rows = np.stack([np.asarray(embedder(img), dtype=np.float64).ravel() for img in images])
    return EmbeddingSet(rows, getattr(embedder, "id", getattr(embedder, "__name__", "custom")))


def write_feature_file(path, vectors: np.ndarray) -> None:
    """``EMB1`` container: magic, dtype tag ``f32``, uint32 N, uint32 d, then row-major float32."""
    v = np.ascontiguousarray(vectors, dtype="<f4")
    if v.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-d, got {v.shape}")
    with open(path, "wb") as fh:
        fh.write(EMB_HEADER.pack(EMB_MAGIC, EMB_DTYPE, v.shape[0], v.shape[1]))
        fh.write(v.tobytes())


def read_feature_file(path) -> EmbeddingSet:
    data = Path(path).read_bytes()
    if len(data) < EMB_HEADER.size:
        raise DataError(f"{path}: too short for an EMB1 header")
    magic, dtype, n, d = EMB_HEADER.unpack_from(data)
    if magic != EMB_MAGIC or dtype != EMB_DTYPE:
        raise DataError(f"{path}: not an EMB1 float32 feature file")
    expected = EMB_HEADER.size + 4 * n * d
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {n}x{d} features, found {len(data)}")
    vec = np.frombuffer(data, dtype="<f4", offset=EMB_HEADER.size).reshape(n, d)
    return EmbeddingSet(vec.astype(np.float64), f"features:{Path(path).name}")


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray


def gaussian_stats(emb: EmbeddingSet) -> GaussianStats:
    x = emb.vectors
    if x.shape[0] < 2:
        raise DataError(f"need at least 2 embeddings for a covariance, got {x.shape[0]}")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return GaussianStats(mu, (cov + cov.T) / 2.0)


def matrix_sqrt_psd(s: np.ndarray, sym_tol: float = 1e-8, neg_tol: float = 1e-8) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues down to ``-neg_tol * max(1, |lambda|_max)`` are clamped to zero.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise MatrixError(f"expected a square matrix, got shape {s.shape}")
    scale = max(1.0, float(np.abs(s).max(initial=0.0)))
    if np.abs(s - s.T).max(initial=0.0) > sym_tol * scale:
        raise MatrixError("matrix is not symmetric")
    w, v = np.linalg.eigh((s + s.T) / 2.0)
    if w.size and w.min() < -neg_tol * max(1.0, float(np.abs(w).max())):
        raise MatrixError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    r = (v * np.sqrt(w)) @ v.T
    return (r + r.T) / 2.0


def frechet_distance(a: GaussianStats, b: GaussianStats, floor: float = 1e-6) -> float:
    if a.mean.shape != b.mean.shape or a.covariance.shape != b.covariance.shape:
        raise ShapeError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    sa = matrix_sqrt_psd(a.covariance)
    middle = sa @ b.covariance @ sa
    cross = matrix_sqrt_psd((middle + middle.T) / 2.0)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.trace(cross))
    if value < 0:
        scale = max(1.0, float(np.trace(a.covariance) + np.trace(b.covariance)))
        if value < -floor * scale:
            raise NumericalError(f"Fréchet distance came out negative ({value:.3e})")
        value = 0.0
    return value


def fid_from_embeddings(real: EmbeddingSet, fake: EmbeddingSet) -> float:
    return frechet_distance(gaussian_stats(real), gaussian_stats(fake))


# ---------------------------------------------------------------------------
# NLDA recognition
# ---------------------------------------------------------------------------


def _orth_range(m: np.ndarray, rtol: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (range basis, null basis) of the row space of ``m``."""
    _, s, vt = np.linalg.svd(m, full_matrices=True)
    cut = rtol * (s[0] if s.size else 0.0)
    rank = int((s > cut).sum()) if s.size and s[0] > 0 else 0
    return vt[:rank].T, vt[rank:].T


def nlda_fit(features: np.ndarray, labels: Sequence, rtol: float = 1e-9) -> np.ndarray:
    """Null-space LDA projection with orthonormal columns, shape ``(d, p)``.

    Works inside the range of the total scatter, keeps the null space of the
    within-class scatter there, and within it the directions of non-zero
    between-class scatter.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DataError("NLDA needs at least two classes")
    if x.shape[0] != len(labels):
        raise ShapeError("features and labels differ in length")
    centered = x - x.mean(axis=0)
    total_basis, _ = _orth_range(centered, rtol)
    if total_basis.shape[1] == 0:
        raise NullSpaceEmpty("total scatter is zero")
    z = centered @ total_basis
    means = np.stack([z[labels == c].mean(axis=0) for c in classes])
    within = z - means[np.searchsorted(classes, labels)]
    if np.abs(within).max() == 0:
        null = np.eye(z.shape[1])
    else:
        # relative to the total scatter so tiny within-class noise is not mistaken for zero
        _, s, vt = np.linalg.svd(within, full_matrices=True)
        s_total = np.linalg.norm(z, 2)
        rank = int((s > rtol * s_total).sum())
        null = vt[rank:].T
    if null.shape[1] == 0:
        raise NullSpaceEmpty("within-class scatter is full rank in the data range; reduce the feature dimension")
    counts = np.array([(labels == c).sum() for c in classes], dtype=np.float64)
    between = (np.sqrt(counts)[:, None] * means) @ null
    disc, _ = _orth_range(between, rtol)
    w = total_basis @ null @ disc if disc.shape[1] else total_basis @ null
    return w


def within_class_scatter(features: np.ndarray, labels: Sequence) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    sw = np.zeros((x.shape[1], x.shape[1]))
    for c in np.unique(labels):
        dev = x[labels == c] - x[labels == c].mean(axis=0)
        sw += dev.T @ dev
    return sw


def nlda_image_feature(img: np.ndarray, size: int = 32) -> np.ndarray:
    """Grayscale image downscaled to ``size x size`` and vectorized."""
    return resize_plane(to_gray(img), size).ravel().astype(np.float64)


@dataclass
class RecognitionReport:
    repeats: int
    accuracies: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "repeats": self.repeats, "accuracies": list(self.accuracies)}


def recognition_protocol(
    gallery: Sequence[np.ndarray],
    gallery_ids: Sequence,
    probes: Sequence[np.ndarray],
    probe_ids: Sequence,
    repeats: int = 20,
    seed: int = 0,
    fit_fraction: float = 0.6,
    featurizer: Callable[[np.ndarray], np.ndarray] | None = nlda_image_feature,
) -> RecognitionReport:
    """Probe/gallery nearest-neighbour recognition in an NLDA subspace.

    Each repeat splits the identities at random: NLDA is fitted on the real
    and synthesized images of ``fit_fraction`` of them, and the remaining
    probes are matched against the remaining gallery. ``featurizer=None``
    means the inputs are already feature vectors.
    """
    feat = featurizer or (lambda v: np.asarray(v, dtype=np.float64).ravel())
    g = np.stack([feat(im) for im in gallery])
    p = np.stack([feat(im) for im in probes])
    g_ids, p_ids = np.asarray(gallery_ids), np.asarray(probe_ids)
    ids = np.unique(g_ids)
    if set(ids.tolist()) != set(np.unique(p_ids).tolist()):
        raise DataError("gallery and probe identity sets differ")
    if len(ids) < 4:
        raise DataError(f"need at least 4 identities, got {len(ids)}")
    n_fit = min(len(ids) - 2, max(2, int(round(fit_fraction * len(ids)))))
    rng = np.random.default_rng(seed)
    report = RecognitionReport(repeats)
    for _ in range(repeats):
        perm = rng.permutation(ids)
        fit_ids, eval_ids = perm[:n_fit], perm[n_fit:]
        g_fit, p_fit = np.isin(g_ids, fit_ids), np.isin(p_ids, fit_ids)
        w = nlda_fit(np.vstack([g[g_fit], p[p_fit]]), np.concatenate([g_ids[g_fit], p_ids[p_fit]]))
        g_eval, p_eval = np.isin(g_ids, eval_ids), np.isin(p_ids, eval_ids)
        gp, pp = g[g_eval] @ w, p[p_eval] @ w
        d2 = ((pp[:, None, :] - gp[None, :, :]) ** 2).sum(axis=-1)
        nearest = g_ids[g_eval][np.argmin(d2, axis=1)]
        report.accuracies.append(float(np.mean(nearest == p_ids[p_eval])))
    return report


def metric_report(fid: float | None, nlda: RecognitionReport | None, embedder_id: str, config: dict) -> dict:
    return {
        "fid": fid,
        "nlda": nlda.to_dict() if nlda is not None else None,
        "embedder_id": embedder_id,
        "config": config,
    }
