"""Lloyd's k-means with k-means++ seeding and empty-cluster repair."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

KASG_MAGIC = b"KASG"


@dataclass
class KMeansResult:
    centroids: np.ndarray  # K x d
    assignments: np.ndarray  # N, values in [0, K)
    inertia: float
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_distances(X, C, x_sq):
    d2 = x_sq[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def _assign(X, C, x_sq):
    d2 = _sq_distances(X, C, x_sq)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(X)), labels]


def _cluster_means(X, labels, k, old):
    """Per-cluster means via sorted segment sums (fixed summation order)."""
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    counts = np.bincount(labels, minlength=k)
    starts = np.searchsorted(sorted_labels, np.arange(k))
    C = old.copy()
    nonempty = counts > 0
    sums = np.add.reduceat(X[order], starts[nonempty], axis=0)
    C[nonempty] = sums / counts[nonempty, None]
    return C


def _kmeans_pp(X, k, rng, x_sq):
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = _sq_distances(X, X[chosen], x_sq)[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centre: fall back to an unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_distances(X, X[[nxt]], x_sq)[:, 0])
    return X[chosen].copy()


def _repair_empty(X, C, labels, d2, x_sq):
    """Move each empty centroid onto the farthest member of the largest cluster.

    One extra assignment pass follows. If ties in that pass would empty a
    cluster again (coincident points), the forced assignment is kept.
    """
    k = len(C)
    counts = np.bincount(labels, minlength=k)
    if counts.min() > 0:
        return C, labels, d2
    C = C.copy()
    labels = labels.copy()
    d2 = d2.copy()
    for j in np.flatnonzero(counts == 0):
        big = int(counts.argmax())
        members = np.flatnonzero(labels == big)
        p = members[d2[members].argmax()]
        C[j] = X[p]
        labels[p] = j
        d2[p] = 0.0
        counts[big] -= 1
        counts[j] += 1
    new_labels, new_d2 = _assign(X, C, x_sq)
    if np.bincount(new_labels, minlength=k).min() > 0:
        return C, new_labels, new_d2
    d2 = np.einsum("ij,ij->i", X - C[labels], X - C[labels])
    return C, labels, d2


def _inertia(X, C, labels):
    diff = X - C[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans(F, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> KMeansResult:
    """Cluster the rows of ``F`` (a FeatureMatrix or 2-D array) into ``k`` groups.

    Stops at an assignment fixpoint, when the relative inertia improvement
    drops below ``tol``, or after ``max_iter`` Lloyd iterations. Returned
    centroids are the means of the returned assignment.
    """
    X = np.asarray(getattr(F, "data", F), dtype=np.float64)
    n = len(X)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    rng = np.random.default_rng(seed)
    x_sq = np.einsum("ij,ij->i", X, X)

    C = _kmeans_pp(X, k, rng, x_sq)
    labels, d2 = _assign(X, C, x_sq)
    C, labels, d2 = _repair_empty(X, C, labels, d2, x_sq)
    history = [_inertia(X, C, labels)]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        C = _cluster_means(X, labels, k, C)
        new_labels, d2 = _assign(X, C, x_sq)
        C, new_labels, d2 = _repair_empty(X, C, new_labels, d2, x_sq)
        inertia = _inertia(X, C, new_labels)
        prev = history[-1]
        history.append(inertia)
        fixpoint = np.array_equal(new_labels, labels)
        labels = new_labels
        if fixpoint or prev <= 0 or (prev - inertia) < tol * prev:
            break
    C = _cluster_means(X, labels, k, C)
    final = _inertia(X, C, labels)
    if final < history[-1]:
        history.append(final)
    return KMeansResult(C, labels, final, iterations, history)


def pseudo_labels(result: KMeansResult) -> np.ndarray:
    return result.assignments.copy()


def save_assignments(path, result: KMeansResult) -> None:
    """b'KASG', u32 N, u32 K (little-endian), then N little-endian u32 labels."""
    a = result.assignments
    with open(path, "wb") as f:
        f.write(KASG_MAGIC)
        f.write(struct.pack("<II", len(a), result.k))
        f.write(np.ascontiguousarray(a, dtype="<u4").tobytes())


def load_assignments(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != KASG_MAGIC:
        raise DataFormatError(f"{path}: not a KASG file")
    n, k = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * n:
        raise DataFormatError(f"{path}: truncated assignments")
    return np.frombuffer(data, dtype="<u4", offset=12).astype(np.int64), k
