"""Codebook: embedding table, exact nearest-neighbour search, EMA state and usage stats."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VQCB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
HEADER_SIZE = _HEADER.size  # 24 bytes

DEFAULT_DECAY = 0.999
DEFAULT_EPSILON = 1e-6



class CodebookFormatError(ValueError):
    """Raised when a serialized codebook stream is malformed."""


def as_data_matrix(x, dim: int | None = None, name: str = "batch") -> np.ndarray:
    """Validate ``x`` as an N x D float64 matrix of finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must have at least one row")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} has {arr.shape[1]} columns, codebook expects {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(eq=False)
class Codebook:
    """K x D table of code vectors with EMA cluster counts.

    Embeddings and counts are stored as float32 (the on-disk precision);
    all arithmetic on them is carried out in float64.
    """

    embeddings: np.ndarray
    ema_counts: np.ndarray = None
    decay: float = DEFAULT_DECAY
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float32, copy=True)
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
            raise ValueError(f"embeddings must be K x D with K, D >= 1, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings contain non-finite values")
        if self.ema_counts is None:
            counts = np.ones(emb.shape[0], dtype=np.float32)
        else:
            counts = np.array(self.ema_counts, dtype=np.float32, copy=True).reshape(-1)
        if counts.shape != (emb.shape[0],):
            raise ValueError("ema_counts must have length K")
        if np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise ValueError("ema_counts must be finite and nonnegative")
        # decay == 1 is accepted as a frozen codebook
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.embeddings = emb
        self.ema_counts = counts
        self.decay = float(self.decay)
        self.epsilon = float(self.epsilon)

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def D(self) -> int:
        return self.embeddings.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.embeddings, self.ema_counts, self.decay, self.epsilon)

    def __eq__(self, other) -> bool:
        # bitwise comparison so that -0.0 != 0.0 and NaN payloads would matter
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.embeddings.shape == other.embeddings.shape
            and self.embeddings.tobytes() == other.embeddings.tobytes()
            and self.ema_counts.tobytes() == other.ema_counts.tobytes()
        )

    @classmethod
    def from_data(
        cls,
        data,
        K: int,
        rng: np.random.Generator,
        decay: float = DEFAULT_DECAY,
        epsilon: float = DEFAULT_EPSILON,
    ) -> "Codebook":
        """Initialise from K distinct rows of ``data``; unit Gaussian draws if N < K."""
        data = as_data_matrix(data, name="data")
        n, d = data.shape
        if n >= K:
            rows = rng.choice(n, size=K, replace=False)
            emb = data[np.sort(rows)]
        else:
            emb = rng.standard_normal((K, d))
        return cls(emb, np.ones(K), decay, epsilon)


def sq_distances(x: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``x`` and rows of ``table``.

    Uses direct differences rather than the expanded ``|a|^2 - 2ab + |b|^2``
    form, so results are nonnegative and argmin ordering matches a per-pair
    evaluation exactly. Coordinates are accumulated left to right, the same
    order as a scalar loop.
    """
    out = np.zeros((x.shape[0], table.shape[0]), dtype=np.float64)
    for j in range(x.shape[1]):
        diff = x[:, j, None] - table[None, :, j]
        out += diff * diff
    return out


def pairwise_sq_distances(batch, cb: Codebook) -> np.ndarray:
    """N x K matrix of squared distances from batch rows to code vectors."""
    x = as_data_matrix(batch, cb.D)
    return sq_distances(x, cb.embeddings.astype(np.float64))


def nearest_code(batch, cb: Codebook) -> np.ndarray:
    """Index of the closest code for each row; ties go to the lowest index."""
    # np.argmin returns the first occurrence of the minimum
    return np.argmin(pairwise_sq_distances(batch, cb), axis=1)


def one_hot(indices, K: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    out = np.zeros((indices.size, K), dtype=np.float64)
    out[np.arange(indices.size), indices] = 1.0
    return out


def ema_update(cb: Codebook, batch, weights) -> Codebook:
    """Return a new codebook after one exponential-moving-average step.

    ``weights[i, j]`` is the share of row ``i`` assigned to code ``j``: a one-hot
    row for hard assignment or the fraction of Monte-Carlo samples for soft EM.
    Counts are updated first, then embeddings are moved toward the
    count-normalised batch sums. Codes whose new count is below ``epsilon``
    keep their embedding.
    """
    x = as_data_matrix(batch, cb.D)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (x.shape[0], cb.K):
        raise ValueError(f"weights must have shape {(x.shape[0], cb.K)}, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite values")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")

    lam = cb.decay
    batch_counts = w.sum(axis=0)
    counts = lam * cb.ema_counts.astype(np.float64) + (1.0 - lam) * batch_counts
    sums = w.T @ x
    emb = cb.embeddings.astype(np.float64)
    live = counts >= cb.epsilon
    emb[live] = lam * emb[live] + (1.0 - lam) * sums[live] / counts[live, None]
    with np.errstate(over="ignore"):
        emb32 = emb.astype(np.float32)
    if not np.all(np.isfinite(emb32)):
        raise FloatingPointError("EMA update produced non-finite embeddings")
    return Codebook(emb32, counts, cb.decay, cb.epsilon)


@dataclass
class UsageStats:
    hit_counts: np.ndarray
    usage_perplexity: float
    dead_codes: int
    total: int = field(default=0)

    @property
    def live_codes(self) -> int:
        return int(self.hit_counts.size - self.dead_codes)


def usage_stats(assignments, K: int) -> UsageStats:
    """Histogram of code hits with usage perplexity exp(H) and the dead-code count."""
    a = np.asarray(assignments).reshape(-1)
    if a.size and (not np.issubdtype(a.dtype, np.integer)):
        if not np.all(a == np.floor(a)):
            raise ValueError("assignments must be integers")
        a = a.astype(np.int64)
    if a.size and (a.min() < 0 or a.max() >= K):
        raise ValueError(f"assignment index out of range [0, {K})")
    hits = np.bincount(a.astype(np.int64), minlength=K)
    total = int(hits.sum())
    if total == 0:
        return UsageStats(hits, 1.0, K, 0)
    p = hits[hits > 0] / total
    perplexity = float(np.exp(-np.sum(p * np.log(p))))
    # clamp round-off so the [1, K] bound holds exactly
    perplexity = min(max(perplexity, 1.0), float(np.count_nonzero(hits)))
    return UsageStats(hits, perplexity, int(np.sum(hits == 0)), total)


def serialize(cb: Codebook) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, cb.K, cb.D)
    emb = cb.embeddings.astype("<f4", copy=False).tobytes(order="C")
    counts = cb.ema_counts.astype("<f4", copy=False).tobytes()
    return header + emb + counts


def deserialize(data: bytes, decay: float = DEFAULT_DECAY, epsilon: float = DEFAULT_EPSILON) -> Codebook:
    """Parse a ``VQCB`` stream. Decay and epsilon are not part of the format."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise CodebookFormatError("truncated header")
    magic, version, K, D = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CodebookFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CodebookFormatError(f"unsupported format version {version}")
    if K < 1 or D < 1:
        raise CodebookFormatError("K and D must be positive")
    n_emb = K * D
    if n_emb >= 1 << 62 or n_emb // D != K:
        raise CodebookFormatError("K*D overflows")
    expected = HEADER_SIZE + 4 * n_emb + 4 * K
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise CodebookFormatError(f"{kind} stream: {len(data)} bytes, expected {expected}")
    emb = np.frombuffer(data, dtype="<f4", count=n_emb, offset=HEADER_SIZE).reshape(K, D)
    counts = np.frombuffer(data, dtype="<f4", count=K, offset=HEADER_SIZE + 4 * n_emb)
    try:
        return Codebook(emb.astype(np.float32), counts.astype(np.float32), decay, epsilon)
    except ValueError as exc:
        raise CodebookFormatError(str(exc)) from exc


def save(cb: Codebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(cb))


def load(path, decay: float = DEFAULT_DECAY, epsilon: float = DEFAULT_EPSILON) -> Codebook:
    with open(path, "rb") as fh:
        return deserialize(fh.read(), decay, epsilon)
