"""PCA-based representation diagnostics.

Fits principal components from the sample covariance (denominator N-1) via a
cyclic Jacobi eigensolver, exposes a rotation-only decorrelation transform
(whitening behind a flag), cumulative explained-variance curves and the
linear-dimensionality measure, plus the mean-normalization ablation.

Fitting streams over chunks in two passes (mean, then centered outer
products), so feature sets never need to fit in memory at once.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "PcaModel",
    "TwoPassCovariance",
    "jacobi_eigh",
    "pca_fit",
    "pca_fit_streaming",
    "pca_transform",
    "pca_inverse_transform",
    "mean_normalize",
    "linear_dimensionality",
    "explained_variance_curve",
]


@dataclass
class PcaModel:
    mean: np.ndarray                      # (D,)
    components: np.ndarray                # (D, D): rows are principal directions
    explained_variance: np.ndarray        # (D,) descending
    explained_variance_ratio: np.ndarray  # (D,) sums to 1

    @property
    def dim(self) -> int:
        return len(self.mean)


def jacobi_eigh(matrix: np.ndarray, tol_factor: float = 1e-10,
                max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvectors as rows, sorted by
    descending eigenvalue. Sweeps stop when the off-diagonal Frobenius norm
    drops below tol_factor * trace (or a tiny absolute floor for zero-trace
    input).
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    v = np.eye(n)
    tol = tol_factor * max(abs(np.trace(a)), 1e-30)
    for _ in range(max_sweeps):
        # cancellation can push the squared off-diagonal mass slightly negative
        off = np.sqrt(max(np.sum(np.square(a)) - np.sum(np.square(np.diag(a))), 0.0))
        if off <= tol:
            break
        skip_below = off / (n * n)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip_below * 1e-3:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(diff) + 100.0 * abs(apq) == abs(diff):
                    t = apq / diff  # rotation angle effectively apq/diff
                else:
                    theta = diff / (2.0 * apq)
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                a[[p, q], :] = rot.T @ a[[p, q], :]
                a[:, [p, q]] = a[:, [p, q]] @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
                a[p, q] = a[q, p] = 0.0
    eigvals = np.diag(a).copy()
    order = np.argsort(eigvals)[::-1]
    return eigvals[order], v[:, order].T


class TwoPassCovariance:
    """Streaming mean and covariance: feed chunks twice, mean pass first."""

    def __init__(self, dim: int):
        self.dim = dim
        self._sum = np.zeros(dim, dtype=np.float64)
        self._count = 0
        self.mean = None
        self._outer = np.zeros((dim, dim), dtype=np.float64)

    def _check(self, chunk: np.ndarray) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.ndim != 2 or chunk.shape[1] != self.dim:
            raise DimensionError(f"expected (N, {self.dim}) chunk, got {chunk.shape}")
        if not np.all(np.isfinite(chunk)):
            raise ContractError("feature matrix contains NaN or Inf")
        return chunk

    def add_mean_pass(self, chunk) -> None:
        chunk = self._check(chunk)
        self._sum += chunk.sum(axis=0)
        self._count += len(chunk)

    def finish_mean(self) -> np.ndarray:
        if self._count <= 1:
            raise ContractError(f"need at least 2 frames to fit, got {self._count}")
        self.mean = self._sum / self._count
        return self.mean

    def add_covariance_pass(self, chunk) -> None:
        if self.mean is None:
            raise ContractError("mean pass must finish before the covariance pass")
        centered = self._check(chunk) - self.mean
        self._outer += centered.T @ centered

    def covariance(self) -> np.ndarray:
        return self._outer / (self._count - 1)


def _fit_from_cov(mean: np.ndarray, cov: np.ndarray) -> PcaModel:
    eigvals, components = jacobi_eigh(cov)
    eigvals = np.maximum(eigvals, 0.0)
    dim = len(mean)
    total = eigvals.sum()
    if total <= 0.0:
        warnings.warn("degenerate input: zero variance in every direction; "
                      "explained-variance ratios set to 1/D", RuntimeWarning)
        ratios = np.full(dim, 1.0 / dim)
    else:
        ratios = eigvals / total
    # deterministic sign: make each direction's largest-magnitude loading positive
    flips = np.sign(components[np.arange(dim), np.argmax(np.abs(components), axis=1)])
    components = components * flips[:, None]
    return PcaModel(mean.astype(np.float64), components, eigvals, ratios)


def pca_fit(features: np.ndarray) -> PcaModel:
    features = np.asarray(features)
    if features.ndim != 2:
        raise DimensionError(f"expected a 2-D feature matrix, got shape {features.shape}")
    return pca_fit_streaming([features], dim=features.shape[1])


def pca_fit_streaming(chunks: Iterable[np.ndarray], dim: int) -> PcaModel:
    """Two-pass fit over re-iterable chunks (a list, or a re-openable reader)."""
    chunks = list(chunks) if not isinstance(chunks, (list, tuple)) else chunks
    acc = TwoPassCovariance(dim)
    for chunk in chunks:
        acc.add_mean_pass(chunk)
    mean = acc.finish_mean()
    for chunk in chunks:
        acc.add_covariance_pass(chunk)
    return _fit_from_cov(mean, acc.covariance())


def pca_transform(features: np.ndarray, model: PcaModel, whiten: bool = False,
                  epsilon: float = 1e-8) -> np.ndarray:
    """Rotate into the principal basis; optionally scale to unit variance.

    Output width equals input width: decorrelation, not reduction.
    """
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != model.dim:
        raise DimensionError(
            f"feature width {features.shape} does not match model dim {model.dim}")
    out = (features - model.mean) @ model.components.T
    if whiten:
        out = out / np.sqrt(model.explained_variance + epsilon)
    return out.astype(np.float32)


def pca_inverse_transform(transformed: np.ndarray, model: PcaModel,
                          whiten: bool = False, epsilon: float = 1e-8) -> np.ndarray:
    transformed = np.asarray(transformed, dtype=np.float64)
    if transformed.ndim != 2 or transformed.shape[1] != model.dim:
        raise DimensionError(
            f"width {transformed.shape} does not match model dim {model.dim}")
    if whiten:
        transformed = transformed * np.sqrt(model.explained_variance + epsilon)
    return (transformed @ model.components + model.mean).astype(np.float32)


def mean_normalize(features: np.ndarray) -> np.ndarray:
    """Subtract per-dimension means; no rotation, no scaling."""
    features = np.asarray(features)
    if features.ndim != 2 or len(features) < 1:
        raise DimensionError(f"expected a non-empty 2-D matrix, got {features.shape}")
    mean = features.mean(axis=0, dtype=np.float64)
    return (features - mean).astype(np.float32)


def linear_dimensionality(model: PcaModel, threshold: float) -> int:
    """Smallest m whose cumulative explained-variance ratio reaches threshold."""
    if not 0.0 < threshold <= 1.0:
        raise ContractError(f"threshold must be in (0, 1], got {threshold}")
    cumulative = np.cumsum(model.explained_variance_ratio)
    hits = np.nonzero(cumulative >= threshold - 1e-9)[0]
    return int(hits[0]) + 1 if len(hits) else model.dim


def explained_variance_curve(model: PcaModel) -> list[tuple[int, float]]:
    """(m, cumulative ratio) for m = 1..D; non-decreasing, ends at 1."""
    cumulative = np.cumsum(model.explained_variance_ratio)
    return [(m + 1, float(cumulative[m])) for m in range(model.dim)]
