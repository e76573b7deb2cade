"""Discretization layer between encoder and decoder.

Forward pass replaces encoder outputs with code vectors (nearest code, or the
average of Monte-Carlo sampled codes). Backward pass is straight-through plus
the commitment-loss gradient; code vectors never receive gradient and are
updated only by EMA.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import soft_em
from .codebook import Codebook, as_data_matrix, nearest_code, one_hot, pairwise_sq_distances

DEFAULT_BETA = 0.25


@dataclass
class BottleneckOutput:
    quantized: np.ndarray
    assignments: np.ndarray  # hard index vector (N,) or sampled indices (N, m)
    commitment_loss: float
    weights: np.ndarray  # N x K EMA weights (one-hot or sample fractions)
    beta: float = DEFAULT_BETA
    sample: soft_em.AssignmentSample | None = None
    grad_passthrough: bool = True
    nearest: np.ndarray | None = None  # nearest-code index per row, for usage statistics

    @property
    def codes(self) -> np.ndarray:
        """Per-row code used for usage statistics and prior fitting."""
        if self.assignments.ndim == 1:
            return self.assignments
        return np.argmax(self.weights, axis=1)


def commitment_loss(z_e: np.ndarray, z_q: np.ndarray, beta: float) -> float:
    """beta * mean over rows of ||z_e - z_q||^2."""
    diff = z_e - z_q
    return float(beta * np.einsum("nd,nd->", diff, diff) / z_e.shape[0])


def quantize_hard(batch, cb: Codebook, beta: float = DEFAULT_BETA) -> BottleneckOutput:
    z_e = as_data_matrix(batch, cb.D)
    codes = nearest_code(z_e, cb)
    z_q = cb.embeddings.astype(np.float64)[codes]
    return BottleneckOutput(
        quantized=z_q,
        assignments=codes,
        commitment_loss=commitment_loss(z_e, z_q, beta),
        weights=one_hot(codes, cb.K),
        beta=beta,
        nearest=codes,
    )


def quantize_soft(
    batch, cb: Codebook, m: int = soft_em.DEFAULT_SAMPLES, seed: int = 0, beta: float = DEFAULT_BETA
) -> BottleneckOutput:
    z_e = as_data_matrix(batch, cb.D)
    dist = pairwise_sq_distances(z_e, cb)
    sample = soft_em.mc_sample(soft_em.posterior_from_sq_distances(dist), m, seed)
    z_q = soft_em.averaged_embedding(sample, cb)
    return BottleneckOutput(
        quantized=z_q,
        assignments=sample.samples,
        commitment_loss=commitment_loss(z_e, z_q, beta),
        weights=soft_em.soft_m_step_weights(sample),
        beta=beta,
        sample=sample,
        nearest=np.argmin(dist, axis=1),
    )


def backward(upstream_grad, out: BottleneckOutput, batch) -> np.ndarray:
    """Gradient of (decoder loss + commitment loss) with respect to the encoder output.

    The decoder gradient at z_q is copied verbatim (straight-through) and the
    commitment term adds 2 * beta * (z_e - z_q) / N, treating z_q as a constant.
    """
    g = np.asarray(upstream_grad, dtype=np.float64)
    z_e = np.asarray(batch, dtype=np.float64)
    if g.shape != out.quantized.shape or z_e.shape != out.quantized.shape:
        raise ValueError(
            f"shape mismatch: grad {g.shape}, batch {z_e.shape}, quantized {out.quantized.shape}"
        )
    if out.beta == 0:
        return g.copy()
    return g + (2.0 * out.beta / z_e.shape[0]) * (z_e - out.quantized)


def total_loss(reconstruction: float, out: BottleneckOutput) -> float:
    return float(reconstruction) + out.commitment_loss
