"""Convergence and precision diagnostics for MCMC output."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = ["PosteriorSummary", "gelman_rubin", "mc_error", "summarize_param"]


@dataclass(frozen=True)
class PosteriorSummary:
    median: float
    lower95: float
    upper95: float
    mc_error: float
    r_hat: float | None

    def to_dict(self) -> dict:
        return {
            "median": self.median,
            "lower95": self.lower95,
            "upper95": self.upper95,
            "mc_error": self.mc_error,
            "r_hat": self.r_hat,
        }


def gelman_rubin(chains: Sequence[np.ndarray]) -> float:
    """Potential scale reduction factor (Gelman & Rubin 1992).

    sqrt of (weighted within- plus between-chain variance) over the mean
    within-chain variance; floored at 1.0 for reporting.  Equal-mean
    degenerate chains give exactly 1.0; zero within-chain variance with
    unequal means gives +inf.
    """
    if len(chains) < 2:
        raise ValueError("need at least 2 chains")
    arrays = [np.asarray(c, dtype=float) for c in chains]
    n = arrays[0].shape[0]
    if any(a.shape != (n,) for a in arrays):
        raise ValueError("chains must share one length")
    if n < 2:
        raise ValueError("chains must have length >= 2")
    means = np.array([a.mean() for a in arrays])
    w = float(np.mean([a.var(ddof=1) for a in arrays]))
    b = n * float(means.var(ddof=1))
    if w == 0.0:
        return 1.0 if b == 0.0 else math.inf
    value = math.sqrt(((n - 1) / n * w + b / n) / w)
    return max(value, 1.0)


def mc_error(draws: np.ndarray) -> float:
    """Batch-means Monte Carlo standard error with floor(sqrt(n)) batches."""
    draws = np.asarray(draws, dtype=float)
    n = draws.shape[0]
    if n < 100:
        raise ValueError("need at least 100 draws for batch means")
    n_batches = int(math.isqrt(n))
    batch_size = n // n_batches
    used = draws[: n_batches * batch_size].reshape(n_batches, batch_size)
    batch_means = used.mean(axis=1)
    return float(batch_means.std(ddof=1) / math.sqrt(n_batches))


def summarize_param(
    pooled: np.ndarray, per_chain: Sequence[np.ndarray]
) -> PosteriorSummary:
    """Median, central 95% interval, MC error and (multi-chain) R-hat.

    Percentiles interpolate linearly between order statistics.  With a
    single chain R-hat is unavailable (None).  For pooled samples shorter
    than the batch-means minimum a plain std/sqrt(n) fallback is used.
    """
    pooled = np.asarray(pooled, dtype=float)
    if pooled.size == 0:
        raise ValueError("no draws to summarize")
    lo, med, hi = np.percentile(pooled, [2.5, 50.0, 97.5])
    if pooled.size >= 100:
        err = mc_error(pooled)
    else:
        err = float(pooled.std(ddof=1) / math.sqrt(pooled.size)) if pooled.size > 1 else 0.0
    r_hat = gelman_rubin(per_chain) if len(per_chain) >= 2 else None
    return PosteriorSummary(
        median=float(med),
        lower95=float(lo),
        upper95=float(hi),
        mc_error=err,
        r_hat=r_hat,
    )
