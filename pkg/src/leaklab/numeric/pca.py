"""PCA through a cyclic Jacobi eigensolver on the (small) covariance matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from leaklab.errors import ArgumentError


@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray  # (k, d), rows orthonormal
    explained_variance_ratio: np.ndarray  # (k,), non-increasing
    mean: np.ndarray  # (d,)
    eigenvalues: np.ndarray  # (k,)

    def transform(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, coords) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) @ self.components + self.mean


def jacobi_eigh(sym, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a symmetric matrix with cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue,
    eigenvectors as columns.
    """
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    vecs = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                vecs = vecs @ rot
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order]


def pca_fit(points, k: int) -> PcaResult:
    """Top-``k`` principal directions of ``points`` (n x d).

    Zero-variance data yields all-zero ratios; components are then an
    arbitrary orthonormal set (the identity rows).
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ArgumentError(f"pca_fit needs at least 2 points in a 2-D array, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ArgumentError(f"k={k} out of range [1, {min(n, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    vals, vecs = jacobi_eigh(cov)
    vals = np.clip(vals, 0.0, None)
    total = vals.sum()
    comps = vecs[:, :k].T.copy()
    # deterministic sign: largest-magnitude entry of each component positive
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    ratios = vals[:k] / total if total > 0 else np.zeros(k)
    return PcaResult(components=comps, explained_variance_ratio=ratios, mean=mean, eigenvalues=vals[:k])
