"""Partition agreement (NMI), Initial Alignment and classification accuracy."""
from __future__ import annotations

import math

import numpy as np

from .clustering import kmeans
from .data import ImageDataset, TransformSpec
from .features import FeatureMatrix, extract_features, prepare_for_clustering
from .nn import Network


def _as_partition(labels, name) -> np.ndarray:
    a = np.asarray(labels)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D label vector")
    return a


def _entropy(counts, n) -> float:
    p = counts[counts > 0] / n
    # fsum is exactly rounded, hence independent of term order.
    return -math.fsum((p * np.log(p)).tolist())


def nmi(a, b) -> float:
    """Normalised mutual information, I(a;b) / sqrt(H(a) H(b)), natural logs.

    Two single-cluster partitions score 1; exactly one single-cluster
    partition scores 0.
    """
    a = _as_partition(a, "a")
    b = _as_partition(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"partition lengths differ: {len(a)} vs {len(b)}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    ka, kb = ai.max() + 1, bi.max() + 1
    table = np.bincount(ai * kb + bi, minlength=ka * kb).reshape(ka, kb)
    row, col = table.sum(axis=1), table.sum(axis=0)
    ha, hb = _entropy(row, n), _entropy(col, n)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    i, j = np.nonzero(table)
    nij = table[i, j].astype(np.float64)
    terms = (nij / n) * (np.log(nij) + math.log(n) - (np.log(row[i]) + np.log(col[j])))
    mi = math.fsum(terms.tolist())
    return float(min(max(mi / math.sqrt(ha * hb), 0.0), 1.0))


def cycle_consistency(prev, curr) -> float:
    """NMI between the pseudo-labels of two consecutive cycles."""
    return nmi(prev, curr)


def accuracy(predicted, truth) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise ValueError("empty label vectors")
    return float(np.mean(predicted == truth))


def ia_from_features(F: FeatureMatrix, truth, k: int, pca_components: int | None = None, seed: int = 0,
                     max_iter: int = 100, tol: float = 1e-4) -> float:
    """IA for features already extracted from an untrained network."""
    V = prepare_for_clustering(F, pca_components)
    result = kmeans(V, k, seed=seed, max_iter=max_iter, tol=tol)
    return nmi(truth, result.assignments)


def ia(net: Network, ds: ImageDataset, k: int, spec: TransformSpec, pca_components: int | None = None,
       seed: int = 0, batch_size: int = 256) -> float:
    """Initial Alignment: NMI(ground truth, k-means assignments on the random-net features)."""
    if ds.labels is None:
        raise ValueError("IA needs a dataset with ground-truth labels")
    F = extract_features(net, ds, spec, batch_size=batch_size)
    return ia_from_features(F, ds.labels, k, pca_components, seed)
