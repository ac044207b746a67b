"""Synthetic meta-epidemiological data from known truth, plus Monte Carlo
variance oracles used by the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dataset import (
    Dataset,
    MetaAnalysis,
    OutcomeType,
    RoBJudgment,
    TrialRecord,
    filter_eligible,
)
from .decompose import DecompositionInput, cell_weights
from .model import (
    CHARACTERISTIC_ORDER,
    BiasCell,
    BiasTerm,
    Characteristic,
    ModelSpec,
    cell_mean,
    cell_variance,
)

__all__ = [
    "SimTruth",
    "SimShape",
    "SimulationError",
    "generate_dataset",
    "mc_variance_oracle",
    "recovery_report",
    "RecoveryMetrics",
]

_SEED_MASK = (1 << 64) - 1


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimTruth:
    """Generating values: per-term ratios/biases and the tau2 hyperlaw."""

    lambdas: Mapping[BiasTerm, float]
    b0s: Mapping[BiasTerm, float]
    phis: Mapping[BiasTerm, float]  # between-meta bias SDs
    mu_tau: float = math.log(0.04)
    sigma_tau: float = 0.4
    baseline_logodds_mean: float = -0.7
    baseline_logodds_sd: float = 0.5
    d_mean: float = 0.0
    d_sd: float = 0.3

    def __post_init__(self):
        if any(v <= 0 for v in self.lambdas.values()):
            raise ValueError("ratios must be positive")
        if any(v < 0 for v in self.phis.values()):
            raise ValueError("bias SDs must be non-negative")
        if self.sigma_tau <= 0 or self.baseline_logodds_sd < 0 or self.d_sd < 0:
            raise ValueError("scale parameters must be non-negative")

    @classmethod
    def constant(
        cls,
        spec: ModelSpec,
        lam: float = 1.0,
        b0: float = 0.0,
        phi: float = 0.1,
        **kwargs,
    ) -> "SimTruth":
        """Same ratio/bias/SD on every term of the spec."""
        terms = spec.terms
        return cls(
            lambdas={t: lam for t in terms},
            b0s={t: b0 for t in terms},
            phis={t: phi for t in terms},
            **kwargs,
        )

    def to_dict(self) -> dict:
        return {
            "lambdas": {t.label: v for t, v in self.lambdas.items()},
            "b0s": {t.label: v for t, v in self.b0s.items()},
            "phis": {t.label: v for t, v in self.phis.items()},
            "mu_tau": self.mu_tau,
            "sigma_tau": self.sigma_tau,
            "baseline_logodds_mean": self.baseline_logodds_mean,
            "baseline_logodds_sd": self.baseline_logodds_sd,
            "d_mean": self.d_mean,
            "d_sd": self.d_sd,
        }


@dataclass(frozen=True)
class SimShape:
    """Dataset dimensions: counts, sizes, flag rates and outcome mix.

    Size triples are (min, median, max); sampling is log-uniform within each
    half so the stated median is hit exactly in distribution.
    """

    n_metas: int = 20
    trials_per_meta: tuple[int, int, int] = (5, 10, 75)
    n_per_arm: tuple[int, int, int] = (4, 60, 91000)
    prob_high_or_unclear: Mapping[Characteristic, float] = field(
        default_factory=lambda: {
            Characteristic.SG: 0.53,
            Characteristic.AC: 0.57,
            Characteristic.BL: 0.48,
        }
    )
    outcome_mix: tuple[float, float, float] = (0.18, 0.20, 0.61)
    flag_correlation: float = 0.0

    def __post_init__(self):
        if self.n_metas < 1:
            raise ValueError("n_metas must be >= 1")
        for triple in (self.trials_per_meta, self.n_per_arm):
            lo, med, hi = triple
            if not (1 <= lo <= med <= hi):
                raise ValueError(f"bad size triple {triple}")
        if any(not 0.0 <= p <= 1.0 for p in self.prob_high_or_unclear.values()):
            raise ValueError("flag probabilities must lie in [0, 1]")
        if any(p < 0 for p in self.outcome_mix) or sum(self.outcome_mix) <= 0:
            raise ValueError("outcome mix must be non-negative and sum > 0")
        if not 0.0 <= self.flag_correlation < 1.0:
            raise ValueError("flag_correlation must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "n_metas": self.n_metas,
            "trials_per_meta": list(self.trials_per_meta),
            "n_per_arm": list(self.n_per_arm),
            "prob_high_or_unclear": {
                c.value: p for c, p in self.prob_high_or_unclear.items()
            },
            "outcome_mix": list(self.outcome_mix),
            "flag_correlation": self.flag_correlation,
        }


def _draw_size(triple: tuple[int, int, int], rng: np.random.Generator) -> int:
    lo, med, hi = triple
    if rng.random() < 0.5:
        value = math.exp(rng.uniform(math.log(lo), math.log(med)))
    else:
        value = math.exp(rng.uniform(math.log(med), math.log(hi)))
    return max(lo, min(hi, int(round(value))))


_OUTCOMES = (OutcomeType.MORTALITY, OutcomeType.OBJECTIVE_OTHER, OutcomeType.SUBJECTIVE)
# flagged trials are recorded as unclear more often than high
_PROB_HIGH_GIVEN_FLAGGED = 0.3


def _draw_flags(
    shape: SimShape, n_trials: int, rng: np.random.Generator
) -> np.ndarray:
    """(n_trials, 3) flag matrix over SG, AC, BL with optional correlation."""
    probs = np.array(
        [shape.prob_high_or_unclear[c] for c in CHARACTERISTIC_ORDER]
    )
    u = rng.random((n_trials, 3))
    if shape.flag_correlation > 0.0:
        shared = rng.random(n_trials)
        use_shared = rng.random(n_trials) < shape.flag_correlation
        u = np.where(use_shared[:, None], shared[:, None], u)
    return u < probs[None, :]


def generate_dataset(
    truth: SimTruth,
    shape: SimShape,
    spec: ModelSpec,
    seed: int,
) -> tuple[Dataset, dict]:
    """Draw a dataset from the generative model; returns (data, truth record).

    Flag matrices are resampled (up to 100 attempts per meta) until every
    modeled characteristic shows both risk classes, so generated datasets
    always pass the eligibility filter for ``spec``.
    """
    terms = spec.terms
    for t in terms:
        if t not in truth.lambdas or t not in truth.b0s or t not in truth.phis:
            raise ValueError(f"truth missing values for term {t.label}")
    char_pos = {c: j for j, c in enumerate(CHARACTERISTIC_ORDER)}
    model_cols = [char_pos[c] for c in spec.characteristics]
    mix = np.asarray(shape.outcome_mix, dtype=float)
    mix = mix / mix.sum()

    metas = []
    per_meta_truth = []
    for m in range(shape.n_metas):
        rng = np.random.Generator(
            np.random.Philox(key=(seed ^ m) & _SEED_MASK)
        )
        meta_id = f"m{m + 1}"
        outcome = _OUTCOMES[rng.choice(3, p=mix)]
        n_trials = _draw_size(shape.trials_per_meta, rng)

        flags = None
        for _ in range(100):
            cand = _draw_flags(shape, n_trials, rng)
            sub = cand[:, model_cols]
            if np.all(sub.any(axis=0)) and np.all((~sub).any(axis=0)):
                flags = cand
                break
        if flags is None:
            raise SimulationError(
                f"meta {meta_id}: could not satisfy eligibility for "
                f"{[c.value for c in spec.characteristics]} in 100 attempts"
            )

        d_m = rng.normal(truth.d_mean, truth.d_sd)
        tau2_m = math.exp(rng.normal(truth.mu_tau, truth.sigma_tau))
        b_m = {t: rng.normal(truth.b0s[t], truth.phis[t]) for t in terms}

        trials = []
        for i in range(n_trials):
            cell = BiasCell(tuple(bool(flags[i, j]) for j in model_cols))
            mean = cell_mean(d_m, b_m, cell, spec)
            var = cell_variance(tau2_m, truth.lambdas, cell, spec)
            theta = rng.normal(mean, math.sqrt(var))
            mu = rng.normal(truth.baseline_logodds_mean, truth.baseline_logodds_sd)
            n_c = _draw_size(shape.n_per_arm, rng)
            n_t = _draw_size(shape.n_per_arm, rng)
            p_c = 1.0 / (1.0 + math.exp(-mu))
            p_t = 1.0 / (1.0 + math.exp(-(mu + theta)))
            ev_c = int(rng.binomial(n_c, p_c))
            ev_t = int(rng.binomial(n_t, p_t))
            judgments = []
            for j in range(3):
                if flags[i, j]:
                    if rng.random() < _PROB_HIGH_GIVEN_FLAGGED:
                        judgments.append(RoBJudgment.HIGH)
                    else:
                        judgments.append(RoBJudgment.UNCLEAR)
                else:
                    judgments.append(RoBJudgment.LOW)
            trials.append(
                TrialRecord(
                    meta_id=meta_id,
                    trial_id=f"t{i + 1}",
                    events_treat=ev_t,
                    n_treat=n_t,
                    events_ctrl=ev_c,
                    n_ctrl=n_c,
                    rob_sg=judgments[0],
                    rob_ac=judgments[1],
                    rob_bl=judgments[2],
                    outcome=outcome,
                )
            )
        metas.append(MetaAnalysis(meta_id=meta_id, trials=tuple(trials), outcome=outcome))
        per_meta_truth.append(
            {
                "meta_id": meta_id,
                "d": d_m,
                "tau2": tau2_m,
                "b": {t.label: b_m[t] for t in terms},
            }
        )

    ds = Dataset(metas=tuple(metas))
    result = filter_eligible(ds, spec.characteristics)
    assert not result.excluded, "generator must produce eligible metas"
    record = {
        "seed": seed,
        "spec": spec.to_dict(),
        "shape": shape.to_dict(),
        "truth": truth.to_dict(),
        "per_meta": per_meta_truth,
    }
    return ds, record


def mc_variance_oracle(
    inp: DecompositionInput,
    spec: ModelSpec,
    n_draws: int,
    seed: int,
) -> tuple[float, float]:
    """Empirical total variance of simulated trial effects, with jackknife SE.

    Draws a bias cell per sample (from the input's weights), then a normal
    effect with that cell's mean and variance, and returns the sample
    variance of the mixture plus its delete-one jackknife standard error.
    Independent of the closed forms it is used to check.
    """
    if n_draws < 10_000:
        raise ValueError("n_draws must be at least 10^4")
    rng = np.random.Generator(np.random.Philox(key=seed & _SEED_MASK))
    k = spec.k
    weights = cell_weights(inp.pis, k, inp.weighting)
    means = np.empty(1 << k)
    sds = np.empty(1 << k)
    for c in range(1 << k):
        cell = BiasCell.from_index(c, k)
        means[c] = cell_mean(inp.d, inp.biases, cell, spec)
        sds[c] = math.sqrt(cell_variance(inp.tau2, inp.lambdas, cell, spec))
    cells = rng.choice(1 << k, size=n_draws, p=weights / weights.sum())
    draws = means[cells] + sds[cells] * rng.standard_normal(n_draws)

    n = n_draws
    xbar = draws.mean()
    q = (draws - xbar) ** 2
    ss = q.sum()
    variance = ss / (n - 1)
    # delete-one sample variances are affine in q, so the jackknife variance
    # has a closed form
    c = n / (n - 1)
    dev = q - q.mean()
    var_jack = (n - 1) / n * (c / (n - 2)) ** 2 * np.dot(dev, dev)
    return float(variance), float(math.sqrt(var_jack))


@dataclass(frozen=True)
class RecoveryMetrics:
    rows: tuple[dict, ...]
    coverage: float

    def to_dict(self) -> dict:
        return {"rows": list(self.rows), "coverage": self.coverage}


def recovery_report(truth: SimTruth, fit) -> RecoveryMetrics:
    """Compare a fit's global-parameter posteriors against the truth."""
    targets: dict[str, float] = {}
    for t, v in truth.lambdas.items():
        targets[f"lambda[{t.label}]"] = v
    for t, v in truth.b0s.items():
        targets[f"b0[{t.label}]"] = v
    for t, v in truth.phis.items():
        targets[f"phi2[{t.label}]"] = v * v
    targets["mu_tau"] = truth.mu_tau
    targets["sigma_tau"] = truth.sigma_tau

    rows = []
    covered = 0
    for name, true_value in targets.items():
        if name not in fit.summaries:
            raise ValueError(f"fit has no summary for parameter {name}")
        s = fit.summaries[name]
        inside = s.lower95 <= true_value <= s.upper95
        covered += inside
        rows.append(
            {
                "parameter": name,
                "truth": true_value,
                "median": s.median,
                "lower95": s.lower95,
                "upper95": s.upper95,
                "covered": bool(inside),
                "abs_error": abs(s.median - true_value),
            }
        )
    return RecoveryMetrics(rows=tuple(rows), coverage=covered / len(rows))
