"""Hard EM with identity-covariance Gaussians and a uniform prior (Lloyd's K-means)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codebook import Codebook, as_data_matrix, sq_distances


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    objective: float
    iterations: int
    counts: np.ndarray = None
    history: list[float] = field(default_factory=list)
    converged: bool = False


def _centers_matrix(centers, dim: int | None = None) -> np.ndarray:
    c = np.asarray(centers, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1:
        raise ValueError(f"centers must be K x D, got shape {c.shape}")
    if dim is not None and c.shape[1] != dim:
        raise ValueError(f"centers have {c.shape[1]} columns, data has {dim}")
    return c


def _check_assignments(assignments, n: int, K: int) -> np.ndarray:
    z = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if z.shape != (n,):
        raise ValueError(f"expected {n} assignments, got {z.shape[0]}")
    if z.size and (z.min() < 0 or z.max() >= K):
        raise ValueError(f"assignment index out of range [0, {K})")
    return z


def e_step(batch, centers) -> np.ndarray:
    """Assign every row to its nearest center (lowest index wins ties)."""
    x = as_data_matrix(batch)
    c = _centers_matrix(centers, x.shape[1])
    return np.argmin(sq_distances(x, c), axis=1)


def m_step(batch, assignments, K: int, previous=None) -> tuple[np.ndarray, np.ndarray]:
    """Recompute each center as the mean of its assigned rows.

    Returns ``(centers, counts)``. Empty clusters keep the corresponding row of
    ``previous`` (zeros when no previous centers are given).
    """
    x = as_data_matrix(batch)
    z = _check_assignments(assignments, x.shape[0], K)
    counts = np.bincount(z, minlength=K).astype(np.float64)
    sums = np.zeros((K, x.shape[1]))
    # unbuffered scatter-add visits rows in order, so sums are reproducible
    np.add.at(sums, z, x)
    if previous is None:
        centers = np.zeros((K, x.shape[1]))
    else:
        centers = _centers_matrix(previous, x.shape[1]).copy()
        if centers.shape[0] != K:
            raise ValueError("previous centers must have K rows")
    nonempty = counts > 0
    centers[nonempty] = sums[nonempty] / counts[nonempty, None]
    return centers, counts


def objective(batch, centers, assignments) -> float:
    """Quantization cost: sum of squared distances from rows to their centers."""
    x = as_data_matrix(batch)
    c = _centers_matrix(centers, x.shape[1])
    z = _check_assignments(assignments, x.shape[0], c.shape[0])
    diff = x - c[z]
    return float(np.einsum("nd,nd->", diff, diff))


def kmeans_fit(batch, K: int, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd iterations from K distinct seeded data rows until assignments stop changing.

    ``history`` holds the objective after every M step; it is checked to be
    non-increasing as the loop runs.
    """
    x = as_data_matrix(batch)
    n = x.shape[0]
    if K < 1:
        raise ValueError("K must be positive")
    if n < K:
        raise ValueError(f"need at least K={K} rows to initialise, got {n}")
    if max_iters < 1:
        raise ValueError("max_iters must be positive")

    rng = np.random.default_rng(seed)
    centers = x[np.sort(rng.choice(n, size=K, replace=False))].copy()
    z = e_step(x, centers)
    history = [objective(x, centers, z)]
    counts = np.bincount(z, minlength=K).astype(np.float64)
    converged = False
    iterations = 0
    while iterations < max_iters:
        centers, counts = m_step(x, z, K, previous=centers)
        iterations += 1
        z_new = e_step(x, centers)
        obj = objective(x, centers, z_new)
        if obj > history[-1] * (1 + 1e-12) + 1e-300:
            raise RuntimeError(f"Lloyd objective increased: {history[-1]} -> {obj}")
        history.append(obj)
        if np.array_equal(z_new, z):
            converged = True
            break
        z = z_new
    return KMeansResult(
        centers=centers,
        assignments=z,
        objective=objective(x, centers, z),
        iterations=iterations,
        counts=counts,
        history=history,
        converged=converged,
    )


def result_to_codebook(result: KMeansResult, decay: float = 0.999) -> Codebook:
    return Codebook(result.centers, result.counts, decay)

