"""Count-based n-gram prior over latent code sequences and the bits/dim bound.

Stands in for an autoregressive neural latent predictor: it is fitted on the
codes the encoder produces (or on sample-averaged soft labels) and scored by
mean negative log-probability per latent.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

BOS = -1
LOG2E = math.log2(math.e)

DEFAULT_ORDER = 2
DEFAULT_ALPHA = 0.1


@dataclass
class NgramPrior:
    order: int
    K: int
    alpha: float = DEFAULT_ALPHA
    counts: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def context(self, seq, t: int) -> tuple[int, ...]:
        n = self.order - 1
        if n == 0:
            return ()
        window = [int(c) for c in seq[max(0, t - n):t]]
        return (BOS,) * (n - len(window)) + tuple(window)

    def _row(self, ctx: tuple[int, ...]) -> np.ndarray:
        row = self.counts.get(ctx)
        if row is None:
            row = np.zeros(self.K)
            self.counts[ctx] = row
        return row

    def distribution(self, ctx: tuple[int, ...]) -> np.ndarray:
        """Smoothed conditional P(code | context); uniform when the context has no mass."""
        row = self.counts.get(tuple(ctx))
        if row is None:
            return np.full(self.K, 1.0 / self.K)
        denom = row.sum() + self.alpha * self.K
        if denom <= 0:
            return np.full(self.K, 1.0 / self.K)
        return (row + self.alpha) / denom

    def prob(self, code: int, ctx: tuple[int, ...] = ()) -> float:
        return float(self.distribution(ctx)[code])


def _check_sequence(seq, K: int) -> np.ndarray:
    s = np.asarray(seq, dtype=np.int64).reshape(-1)
    if s.size and (s.min() < 0 or s.max() >= K):
        raise ValueError(f"code out of range [0, {K})")
    return s


def fit(sequences, order: int = DEFAULT_ORDER, K: int = 256, alpha: float = DEFAULT_ALPHA) -> NgramPrior:
    """Count (context, code) occurrences; contexts are left-padded with BOS."""
    prior = NgramPrior(order, K, alpha)
    for seq in sequences:
        s = _check_sequence(seq, K)
        for t in range(s.size):
            prior._row(prior.context(s, t))[s[t]] += 1.0
    return prior


def fit_smoothed(soft_targets, order: int = DEFAULT_ORDER, alpha: float = DEFAULT_ALPHA) -> NgramPrior:
    """Accumulate fractional counts from per-position label distributions.

    Each element of ``soft_targets`` is an L x K matrix for one sequence. The
    count added for (context, code) is the product of the target weights of
    the context codes and of the code, i.e. the expected count when every
    position is drawn independently from its target row. One-hot targets
    reproduce :func:`fit` exactly.
    """
    prior = None
    for targets in soft_targets:
        T = np.asarray(targets, dtype=np.float64)
        if T.ndim != 2:
            raise ValueError("each target block must be L x K")
        if prior is None:
            prior = NgramPrior(order, T.shape[1], alpha)
        if T.shape[1] != prior.K:
            raise ValueError("all target blocks must share K")
        if np.any(T < 0) or not np.all(np.isfinite(T)) or np.any(np.abs(T.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("target rows must be nonnegative and sum to 1")
        supports = [np.flatnonzero(row) for row in T]
        n = order - 1
        for t in range(T.shape[0]):
            choices = []
            for s in range(t - n, t):
                if s < 0:
                    choices.append(((BOS, 1.0),))
                else:
                    choices.append(tuple((int(j), T[s, j]) for j in supports[s]))
            for combo in itertools.product(*choices):
                ctx = tuple(c for c, _ in combo)
                w = 1.0
                for _, wc in combo:
                    w *= wc
                prior._row(ctx)[:] += w * T[t]
    if prior is None:
        raise ValueError("no targets given")
    return prior


def log_perplexity(prior: NgramPrior, sequences) -> float:
    """Mean negative log-probability (nats) per latent position."""
    total = 0.0
    count = 0
    for seq in sequences:
        s = _check_sequence(seq, prior.K)
        for t in range(s.size):
            p = prior.distribution(prior.context(s, t))[s[t]]
            if p <= 0.0:
                logger.warning("zero-probability code %d after context %s; log-perplexity is infinite",
                               s[t], prior.context(s, t))
                return math.inf
            total -= math.log(p)
            count += 1
    if count == 0:
        raise ValueError("no latent positions to evaluate")
    return total / count


@dataclass
class BitsPerDim:
    l_p: float
    l_lp: float
    n_x: int
    n_z: int
    value: float


def bits_per_dim(l_p: float, l_lp: float, n_x: int, n_z: int) -> BitsPerDim:
    """((l_p * n_x + l_lp * n_z) / n_x) * log2(e), losses in nats."""
    if n_x <= 0 or n_z <= 0:
        raise ValueError("n_x and n_z must be positive")
    if l_p < 0 or l_lp < 0:
        raise ValueError("losses must be nonnegative")
    value = ((l_p * n_x + l_lp * n_z) / n_x) * LOG2E
    return BitsPerDim(float(l_p), float(l_lp), int(n_x), int(n_z), float(value))


def dumps(prior: NgramPrior) -> str:
    """Sorted text form: a header line then one ``context code count`` line per nonzero count."""
    lines = [f"# ngram order={prior.order} K={prior.K} alpha={prior.alpha!r}"]
    for ctx in sorted(prior.counts):
        row = prior.counts[ctx]
        ctx_txt = ",".join(str(c) for c in ctx) if ctx else "-"
        for j in np.flatnonzero(row):
            lines.append(f"{ctx_txt} {j} {float(row[j])!r}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> NgramPrior:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# ngram "):
        raise ValueError("missing ngram header")
    header = dict(item.split("=", 1) for item in lines[0][len("# ngram "):].split())
    prior = NgramPrior(int(header["order"]), int(header["K"]), float(header["alpha"]))
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            ctx_txt, code, count = line.split()
            ctx = () if ctx_txt == "-" else tuple(int(c) for c in ctx_txt.split(","))
            code = int(code)
            value = float(count)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        if len(ctx) != prior.order - 1 or not 0 <= code < prior.K:
            raise ValueError(f"line {lineno}: context/code does not fit header")
        prior._row(ctx)[code] = value
    return prior
