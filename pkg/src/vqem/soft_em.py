"""Monte-Carlo soft EM: posterior over codes, multinomial sampling and fractional weights.

The posterior over codes is a softmax of negative squared distances
(identity-covariance Gaussian likelihood, uniform prior). Each row draws
``m`` codes from it by inverse-CDF sampling. The sample frequencies serve as
M-step weights and as label-smoothed targets for the latent prior. The sample
average of the drawn embeddings is what the decoder receives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import Codebook, pairwise_sq_distances

DEFAULT_SAMPLES = 10

_CHUNK_ELEMS = 1 << 22


@dataclass
class Posterior:
    probs: np.ndarray

    @property
    def K(self) -> int:
        return self.probs.shape[1]


@dataclass
class AssignmentSample:
    samples: np.ndarray
    soft_weights: np.ndarray
    m: int

    @property
    def K(self) -> int:
        return self.soft_weights.shape[1]


def posterior_from_sq_distances(sq_dist) -> Posterior:
    logits = -np.asarray(sq_dist, dtype=np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return Posterior(p)


def posterior(batch, cb: Codebook) -> Posterior:
    """P(code j | row i) proportional to exp(-||e_j - x_i||^2), max-shifted for stability."""
    return posterior_from_sq_distances(pairwise_sq_distances(batch, cb))


def _blocks_per_row(m: int) -> int:
    # Philox emits 4 doubles per counter step
    return -(-m // 4)


def row_uniforms(seed: int, n_rows: int, m: int, row_offset: int = 0) -> np.ndarray:
    """Uniform [0, 1) draws for rows ``row_offset .. row_offset + n_rows``.

    Row ``i`` always reads Philox counter blocks starting at ``i * ceil(m / 4)``
    under key ``seed``, so any partition of rows into chunks reproduces the
    serial draws exactly.
    """
    width = 4 * _blocks_per_row(m)
    bitgen = np.random.Philox(key=int(seed))
    if row_offset:
        bitgen.advance(row_offset * _blocks_per_row(m))
    u = np.random.Generator(bitgen).random((n_rows, width))
    return u[:, :m]


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    targets = u * cdf[:, -1:]
    # index = number of cumulative masses <= target; zero-mass codes are never hit
    idx = np.empty(u.shape, dtype=np.int64)
    n, m = u.shape
    k = probs.shape[1]
    step = max(1, _CHUNK_ELEMS // (m * k))
    for start in range(0, n, step):
        stop = start + step
        idx[start:stop] = np.count_nonzero(
            cdf[start:stop, None, :] <= targets[start:stop, :, None], axis=2
        )
    np.minimum(idx, k - 1, out=idx)
    return idx


def sample_weights(samples: np.ndarray, K: int) -> np.ndarray:
    """Fraction of each row's samples that landed on each code."""
    n, m = samples.shape
    flat = (samples + K * np.arange(n)[:, None]).reshape(-1)
    counts = np.bincount(flat, minlength=n * K).reshape(n, K)
    return counts / m


def mc_sample(post: Posterior, m: int = DEFAULT_SAMPLES, seed: int = 0, row_offset: int = 0) -> AssignmentSample:
    """Draw ``m`` i.i.d. codes per row from the posterior."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    probs = np.asarray(post.probs, dtype=np.float64)
    if probs.ndim != 2 or not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise ValueError("posterior must be a finite nonnegative N x K matrix")
    u = row_uniforms(seed, probs.shape[0], m, row_offset)
    samples = _inverse_cdf(probs, u)
    return AssignmentSample(samples, sample_weights(samples, probs.shape[1]), m)


def averaged_embedding(sample: AssignmentSample, cb: Codebook) -> np.ndarray:
    """Mean of the sampled code vectors for each row."""
    s = sample.samples
    if s.size and (s.min() < 0 or s.max() >= cb.K):
        raise ValueError(f"sample index out of range [0, {cb.K})")
    emb = cb.embeddings.astype(np.float64)
    return emb[s].mean(axis=1)


def soft_m_step_weights(sample: AssignmentSample) -> np.ndarray:
    """EMA weights whose column sums equal the fractional M-step counts."""
    return sample.soft_weights.copy()


def smoothed_labels(sample: AssignmentSample) -> np.ndarray:
    """Average of the one-hot labels of each row's samples (prior training targets)."""
    return sample.soft_weights.copy()
