"""Total heterogeneity variance and the share attributable to flagged trials.

A meta-analysis's trials are spread over bias cells.  Mixing the per-cell
normal effect distributions with the meta's flag frequencies gives the total
heterogeneity by the law of total variance: the weighted mean of cell
variances plus the weighted spread of cell means.  The share of total
heterogeneity attributable to flagged trials is 1 - tau2/tau2_total, floored
at zero (and capped at one).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset, empirical_proportions
from .model import (
    BiasCell,
    BiasTerm,
    ModelSpec,
    Weighting,
    active_terms,
    cell_mean,
    cell_variance,
)

__all__ = [
    "DecompositionInput",
    "DecompositionResult",
    "MetaDecomposition",
    "total_variance_general",
    "total_variance_univariable",
    "total_variance_bivariable",
    "proportion_explained",
    "per_meta_decomposition",
    "cross_meta_summary",
    "figure1_data",
]


@dataclass(frozen=True)
class DecompositionInput:
    """Parameters and cell weights for one total-variance evaluation.

    ``pis`` is either one marginal flag proportion per characteristic
    (marginal-independent weighting) or one weight per bias cell summing to
    one (empirical-joint weighting, bitmask cell order).
    """

    tau2: float
    lambdas: Mapping[BiasTerm, float]
    biases: Mapping[BiasTerm, float]
    d: float
    pis: tuple[float, ...]
    weighting: Weighting = Weighting.MARGINAL_INDEPENDENT

    def __post_init__(self):
        if self.tau2 <= 0:
            raise ValueError("tau2 must be positive")
        if any(v <= 0 for v in self.lambdas.values()):
            raise ValueError("heterogeneity ratios must be positive")
        if self.weighting is Weighting.MARGINAL_INDEPENDENT:
            if any(not 0.0 <= p <= 1.0 for p in self.pis):
                raise ValueError("marginal proportions must lie in [0, 1]")
        else:
            if any(p < 0.0 for p in self.pis):
                raise ValueError("cell weights must be non-negative")
            if abs(sum(self.pis) - 1.0) > 1e-9:
                raise ValueError("cell weights must sum to 1")


def cell_weights(
    pis: Sequence[float], k: int, weighting: Weighting
) -> np.ndarray:
    """Weights over the 2^K bias cells (bitmask order)."""
    n_cells = 1 << k
    if weighting is Weighting.EMPIRICAL_JOINT:
        if len(pis) != n_cells:
            raise ValueError(f"need {n_cells} joint weights, got {len(pis)}")
        return np.asarray(pis, dtype=float)
    if len(pis) != k:
        raise ValueError(f"need {k} marginal proportions, got {len(pis)}")
    w = np.ones(n_cells)
    for c in range(n_cells):
        for j in range(k):
            w[c] *= pis[j] if c >> j & 1 else 1.0 - pis[j]
    return w


def total_variance_general(inp: DecompositionInput, spec: ModelSpec) -> float:
    """Law-of-total-variance mixture over all bias cells.

    Normative for any number of characteristics; the closed forms below are
    algebraic specializations.
    """
    k = spec.k
    w = cell_weights(inp.pis, k, inp.weighting)
    means = np.empty(1 << k)
    variances = np.empty(1 << k)
    for c in range(1 << k):
        cell = BiasCell.from_index(c, k)
        means[c] = cell_mean(inp.d, inp.biases, cell, spec)
        variances[c] = cell_variance(inp.tau2, inp.lambdas, cell, spec)
    mbar = float(np.dot(w, means))
    within = float(np.dot(w, variances))
    between = float(np.dot(w, (means - mbar) ** 2))
    return within + between


def total_variance_univariable(
    tau2: float, lam: float, b: float, pi: float
) -> float:
    """Single-characteristic closed form.

    Low-risk trials contribute (1-pi)*tau2, flagged trials pi*lam*tau2, and
    the mean offset b contributes pi*(1-pi)*b^2.
    """
    if tau2 <= 0 or lam <= 0:
        raise ValueError("tau2 and lam must be positive")
    if not 0.0 <= pi <= 1.0:
        raise ValueError("pi must lie in [0, 1]")
    return (1.0 - pi) * tau2 + pi * lam * tau2 + pi * (1.0 - pi) * b * b


def total_variance_bivariable(
    tau2: float,
    lambdas: tuple[float, float, float],
    biases: tuple[float, float, float],
    d: float,
    pi1: float,
    pi2: float,
) -> float:
    """Two-characteristic closed form with independent flags.

    ``lambdas`` and ``biases`` are ordered (first main effect, second main
    effect, interaction).  The d-dependent terms cancel algebraically; d is
    accepted to make the cancellation testable.
    """
    l1, l2, l3 = lambdas
    b1, b2, b3 = biases
    if tau2 <= 0 or min(l1, l2, l3) <= 0:
        raise ValueError("tau2 and lambdas must be positive")
    if not (0.0 <= pi1 <= 1.0 and 0.0 <= pi2 <= 1.0):
        raise ValueError("pi1 and pi2 must lie in [0, 1]")
    q1 = 1.0 - pi1
    q2 = 1.0 - pi2
    m_ll = d
    m_hl = d + b1
    m_lh = d + b2
    m_hh = d + b1 + b2 + b3
    total = q1 * q2 * tau2 + (q1 * q2 - q1**2 * q2**2) * m_ll**2
    total += pi1 * q2 * l1 * tau2 + (pi1 * q2 - pi1**2 * q2**2) * m_hl**2
    total += pi2 * q1 * l2 * tau2 + (pi2 * q1 - pi2**2 * q1**2) * m_lh**2
    total += pi1 * pi2 * l1 * l2 * l3 * tau2 + (
        pi1 * pi2 - pi1**2 * pi2**2
    ) * m_hh**2
    total -= 2.0 * pi1 * q1 * q2**2 * m_ll * m_hl
    total -= 2.0 * pi2 * q2 * q1**2 * m_ll * m_lh
    total -= 2.0 * pi1 * pi2 * q1 * q2 * m_ll * m_hh
    total -= 2.0 * pi1 * q2 * pi2 * q1 * m_hl * m_lh
    total -= 2.0 * pi1**2 * q2 * pi2 * m_hl * m_hh
    total -= 2.0 * pi2**2 * q1 * pi1 * m_lh * m_hh
    return total


def proportion_explained(tau2: float, tau2_total: float) -> float:
    """Share of total heterogeneity attributable to flagged trials.

    Negative ratios (total below the low-risk variance) are set to zero;
    the result is also capped at one.
    """
    if tau2 <= 0 or tau2_total <= 0:
        raise ValueError("variances must be positive")
    return min(1.0, max(0.0, 1.0 - tau2 / tau2_total))


@dataclass(frozen=True)
class MetaDecomposition:
    meta_id: str
    tau2_median: float
    tau2_total_median: float
    proportion_explained: float
    proportion_unclamped_median: float


@dataclass(frozen=True)
class DecompositionResult:
    per_meta: tuple[MetaDecomposition, ...]
    summary_median: float
    summary_lower95: float
    summary_upper95: float
    weighting: Weighting

    def to_dict(self) -> dict:
        return {
            "weighting": self.weighting.value,
            "per_meta": [
                {
                    "meta_id": m.meta_id,
                    "tau2_median": m.tau2_median,
                    "tau2_total_median": m.tau2_total_median,
                    "proportion_explained": m.proportion_explained,
                    "proportion_unclamped_median": m.proportion_unclamped_median,
                }
                for m in self.per_meta
            ],
            "summary": {
                "median": self.summary_median,
                "lower95": self.summary_lower95,
                "upper95": self.summary_upper95,
            },
        }


def _cell_term_indices(spec: ModelSpec) -> list[list[int]]:
    terms = spec.terms
    index_of = {t: i for i, t in enumerate(terms)}
    out = []
    for c in range(spec.n_cells):
        cell = BiasCell.from_index(c, spec.k)
        out.append([index_of[t] for t in active_terms(cell, spec)])
    return out


def total_variance_draws(
    tau2: np.ndarray,
    d: np.ndarray,
    b: np.ndarray,
    lam: np.ndarray,
    weights: np.ndarray,
    spec: ModelSpec,
) -> np.ndarray:
    """Vectorized total variance over posterior draws for one meta-analysis.

    ``tau2``/``d`` are (n,), ``b`` is (n, T), ``lam`` is (n, T); ``weights``
    has one entry per bias cell.
    """
    n = tau2.shape[0]
    mbar = np.zeros(n)
    within = np.zeros(n)
    sq = np.zeros(n)
    cell_terms = _cell_term_indices(spec)
    means = []
    for c, idx in enumerate(cell_terms):
        mean_c = d.copy()
        var_c = tau2.copy()
        for t in idx:
            mean_c = mean_c + b[:, t]
            var_c = var_c * lam[:, t]
        means.append(mean_c)
        w = weights[c]
        mbar += w * mean_c
        within += w * var_c
    for c, mean_c in enumerate(means):
        sq += weights[c] * (mean_c - mbar) ** 2
    return within + sq


def per_meta_decomposition(
    samples, ds: Dataset, spec: ModelSpec
) -> DecompositionResult:
    """Posterior decomposition of each meta-analysis's heterogeneity.

    For every retained draw, the draw's (tau2, d, biases, ratios) and the
    meta's empirical flag proportions give a total variance; the explained
    proportion is clamped per draw and the per-meta posterior median taken
    afterwards.  The unclamped median is kept alongside for transparency.
    """
    lam = samples.pooled_matrix("lam")  # (n, T)
    per_meta = []
    proportions = []
    for m, meta in enumerate(ds.metas):
        props = empirical_proportions(meta, spec.characteristics)
        if spec.cell_weighting is Weighting.EMPIRICAL_JOINT:
            weights = np.asarray(props.joint)
        else:
            weights = cell_weights(props.marginals, spec.k, Weighting.MARGINAL_INDEPENDENT)
        tau2 = samples.pooled_matrix("tau2")[:, m]
        d = samples.pooled_matrix("d")[:, m]
        b = samples.pooled_matrix("b")[:, m, :]
        total = total_variance_draws(tau2, d, b, lam, weights, spec)
        ratio = 1.0 - tau2 / total
        clamped = np.clip(ratio, 0.0, 1.0)
        prop = float(np.median(clamped))
        per_meta.append(
            MetaDecomposition(
                meta_id=meta.meta_id,
                tau2_median=float(np.median(tau2)),
                tau2_total_median=float(np.median(total)),
                proportion_explained=prop,
                proportion_unclamped_median=float(np.median(ratio)),
            )
        )
        proportions.append(prop)
    med, lo, hi = cross_meta_summary(proportions)
    return DecompositionResult(
        per_meta=tuple(per_meta),
        summary_median=med,
        summary_lower95=lo,
        summary_upper95=hi,
        weighting=spec.cell_weighting,
    )


def cross_meta_summary(values: Sequence[float]) -> tuple[float, float, float]:
    """Median and 2.5/97.5 percentiles across meta-analyses."""
    if len(values) == 0:
        raise ValueError("need at least one per-meta value")
    arr = np.asarray(values, dtype=float)
    lo, med, hi = np.percentile(arr, [2.5, 50.0, 97.5])
    return float(med), float(lo), float(hi)


def figure1_data(
    result: DecompositionResult,
) -> tuple[list[tuple[str, float, float]], int]:
    """Scatter data: per meta (id, tau2 median, total tau2 median).

    Also returns how many metas have low-risk heterogeneity below the total,
    i.e. points under the diagonal.
    """
    points = [
        (m.meta_id, m.tau2_median, m.tau2_total_median) for m in result.per_meta
    ]
    n_below = sum(1 for _, t, tt in points if t < tt)
    return points, n_below
