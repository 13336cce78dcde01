"""Whole-dataset feature extraction and PCA / whitening / L2 post-processing."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ImageDataset, Phase, TransformSpec, apply_transforms
from .errors import DataFormatError, NonFiniteError
from .nn import Network

FMAT_MAGIC = b"FMAT"
WHITEN_EPS = 1e-5
# Rows already this close to unit norm are left untouched, which makes the
# L2 step exactly idempotent.
_UNIT_TOL = 1e-12


@dataclass
class FeatureMatrix:
    data: np.ndarray  # N x D
    source_layer: str = ""

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("feature matrix contains NaN or Inf")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]


@dataclass
class PcaModel:
    mean: np.ndarray  # D
    components: np.ndarray  # D x d, orthonormal columns
    eigenvalues: np.ndarray  # d, descending, >= 0
    epsilon: float = WHITEN_EPS

    @property
    def n_components(self) -> int:
        return self.components.shape[1]


def extract_features(net: Network, ds: ImageDataset, spec: TransformSpec, batch_size=256,
                     layer: str | None = None) -> FeatureMatrix:
    """Feed the whole dataset through ``net`` (eval mode, cluster-phase transforms)."""
    layer = net.resolve_layer(layer)
    was_training = net.training
    net.eval()
    out = np.empty((len(ds), net.block_dims[layer]), dtype=net.dtype)
    try:
        for idx, batch in apply_transforms(ds, spec, Phase.CLUSTER, batch_size=batch_size):
            out[idx] = net.forward(batch, upto=layer)
    finally:
        net.training = was_training
    return FeatureMatrix(out, layer)


def fit_pca(F: FeatureMatrix | np.ndarray, d: int, epsilon=WHITEN_EPS) -> PcaModel:
    """Top-``d`` principal axes of the sample covariance."""
    X = np.asarray(getattr(F, "data", F), dtype=np.float64)
    n, dim = X.shape
    if not 1 <= d <= min(n, dim):
        raise ValueError(f"cannot keep {d} components from a {n} x {dim} matrix")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(Xc):
        raise ValueError("degenerate features: every row is identical")
    cov = Xc.T @ Xc / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:d]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # Fix each axis' sign (largest-magnitude loading positive) for reproducibility.
    signs = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(d)])
    signs[signs == 0] = 1
    return PcaModel(mean, vecs * signs, vals, epsilon)


def whiten(F: FeatureMatrix | np.ndarray, pca: PcaModel) -> np.ndarray:
    """Project onto the PCA basis and scale each axis by 1/sqrt(eigenvalue + eps)."""
    X = np.asarray(getattr(F, "data", F), dtype=np.float64)
    return ((X - pca.mean) @ pca.components) / np.sqrt(pca.eigenvalues + pca.epsilon)


def l2_normalize(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"{int(np.sum(norms == 0))} zero-norm feature rows cannot be L2-normalised")
    norms = np.where(np.abs(norms - 1.0) <= _UNIT_TOL, 1.0, norms)
    return X / norms[:, None]


def postprocess(F: FeatureMatrix, pca: PcaModel | None = None) -> FeatureMatrix:
    """PCA-whiten (when ``pca`` is given) then L2-normalise every row."""
    X = whiten(F, pca) if pca is not None else F.data
    return FeatureMatrix(l2_normalize(X), F.source_layer)


def prepare_for_clustering(F: FeatureMatrix, pca_components: int | None) -> FeatureMatrix:
    """Fit PCA on ``F`` itself (when requested) and post-process."""
    pca = fit_pca(F, pca_components) if pca_components else None
    return postprocess(F, pca)


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------


def save_fmat(path, X) -> None:
    """Binary dump: b'FMAT', u32 N, u32 D (little-endian), then N*D little-endian f32."""
    X = np.asarray(getattr(X, "data", X))
    with open(path, "wb") as f:
        f.write(FMAT_MAGIC)
        f.write(struct.pack("<II", *X.shape))
        f.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def load_fmat(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FMAT_MAGIC:
        raise DataFormatError(f"{path}: not an FMAT file")
    n, d = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * n * d:
        raise DataFormatError(f"{path}: expected {n}x{d} floats, file size {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, d).copy()


def save_csv(path, X, labels=None) -> None:
    X = np.asarray(getattr(X, "data", X))
    if labels is not None:
        X = np.column_stack([np.asarray(labels), X])
    np.savetxt(path, X, delimiter=",", fmt="%.9g")
