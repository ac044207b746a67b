import math

import numpy as np
import pytest

from hetbias.dataset import RiskClass, filter_eligible
from hetbias.decompose import DecompositionInput, total_variance_general
from hetbias.mcmc import McmcConfig, PosteriorSummary, run_analysis
from hetbias.model import BiasTerm, Characteristic, ModelSpec, Weighting
from hetbias.simulate import (
    RecoveryMetrics,
    SimShape,
    SimTruth,
    SimulationError,
    generate_dataset,
    mc_variance_oracle,
    recovery_report,
)

SG, AC, BL = Characteristic.SG, Characteristic.AC, Characteristic.BL


def test_generate_deterministic(spec_sg):
    truth = SimTruth.constant(spec_sg, lam=1.3, b0=0.1, phi=0.05)
    shape = SimShape(n_metas=4, trials_per_meta=(4, 6, 9), n_per_arm=(10, 40, 100))
    ds1, rec1 = generate_dataset(truth, shape, spec_sg, seed=55)
    ds2, rec2 = generate_dataset(truth, shape, spec_sg, seed=55)
    assert ds1 == ds2
    assert rec1 == rec2


def test_generate_impossible_eligibility(spec_sg):
    truth = SimTruth.constant(spec_sg)
    shape = SimShape(
        n_metas=2,
        trials_per_meta=(4, 5, 6),
        n_per_arm=(10, 20, 40),
        prob_high_or_unclear={SG: 0.0, AC: 0.5, BL: 0.5},
    )
    with pytest.raises(SimulationError, match="eligibility"):
        generate_dataset(truth, shape, spec_sg, seed=1)


def test_generated_datasets_always_eligible():
    spec = ModelSpec(characteristics=(SG, AC, BL))
    truth = SimTruth.constant(spec, lam=1.2, b0=-0.1, phi=0.1)
    for seed in range(5):
        shape = SimShape(n_metas=8, trials_per_meta=(5, 8, 14), n_per_arm=(10, 40, 150))
        ds, _ = generate_dataset(truth, shape, spec, seed=seed)
        assert filter_eligible(ds, spec.characteristics).excluded == ()


def test_mean_bias_shift_matches_truth():
    # 2000+ trials, huge arms, tiny heterogeneity: the observed flagged-vs-
    # unflagged contrast converges to the generating mean bias
    spec = ModelSpec(characteristics=(BL,))
    truth = SimTruth.constant(
        spec,
        lam=1.0,
        b0=-0.3,
        phi=0.02,
        mu_tau=math.log(0.01),
        sigma_tau=0.05,
        baseline_logodds_mean=-0.5,
        baseline_logodds_sd=0.2,
        d_mean=0.2,
        d_sd=0.1,
    )
    shape = SimShape(
        n_metas=100,
        trials_per_meta=(18, 20, 22),
        n_per_arm=(2000, 3000, 4000),
        prob_high_or_unclear={c: 0.5 for c in Characteristic},
    )
    ds, _ = generate_dataset(truth, shape, spec, seed=11)

    def logodds(r, n):
        return math.log((r + 0.5) / (n - r + 0.5))

    diffs = []
    for meta in ds.metas:
        flagged, unflagged = [], []
        for t in meta.trials:
            lor = logodds(t.events_treat, t.n_treat) - logodds(t.events_ctrl, t.n_ctrl)
            if t.risk_class(BL) is RiskClass.HIGH_OR_UNCLEAR:
                flagged.append(lor)
            else:
                unflagged.append(lor)
        diffs.append(np.mean(flagged) - np.mean(unflagged))
    assert abs(float(np.mean(diffs)) - (-0.3)) < 0.05


def test_flag_frequency_converges(spec_sg):
    probs = {SG: 0.3, AC: 0.6, BL: 0.5}
    truth = SimTruth.constant(spec_sg)
    shape = SimShape(
        n_metas=100,
        trials_per_meta=(18, 20, 22),
        n_per_arm=(10, 20, 40),
        prob_high_or_unclear=probs,
    )
    ds, _ = generate_dataset(truth, shape, spec_sg, seed=3)
    n = ds.n_trials
    assert n >= 1800
    for char, p in probs.items():
        flagged = sum(
            1
            for t in ds.trials()
            if t.risk_class(char) is RiskClass.HIGH_OR_UNCLEAR
        )
        se = math.sqrt(p * (1 - p) / n)
        assert abs(flagged / n - p) < 3 * se + 0.01


def test_flag_correlation_preserves_marginals_and_couples_flags():
    spec = ModelSpec(characteristics=(SG, AC))
    truth = SimTruth.constant(spec)
    shape = SimShape(
        n_metas=80,
        trials_per_meta=(18, 20, 22),
        n_per_arm=(10, 20, 40),
        prob_high_or_unclear={c: 0.5 for c in Characteristic},
        flag_correlation=0.8,
    )
    ds, _ = generate_dataset(truth, shape, spec, seed=21)
    flags = np.array(
        [
            [t.risk_class(c) is RiskClass.HIGH_OR_UNCLEAR for c in (SG, AC)]
            for t in ds.trials()
        ]
    )
    marg = flags.mean(axis=0)
    assert np.all(np.abs(marg - 0.5) < 0.05)
    both = np.mean(flags[:, 0] & flags[:, 1])
    assert both > marg[0] * marg[1] + 0.1  # strongly positively dependent


def test_oracle_homogeneous_case(spec_sg):
    term = BiasTerm((SG,))
    inp = DecompositionInput(
        tau2=0.06, lambdas={term: 1.0}, biases={term: 0.0}, d=0.4, pis=(0.5,)
    )
    value, se = mc_variance_oracle(inp, spec_sg, n_draws=200_000, seed=17)
    assert abs(value - 0.06) < 4 * se


def test_oracle_consistency_randomized(rng):
    # oracle vs closed form across dimensions and weighting modes
    for case in range(25):
        k = int(rng.integers(1, 4))
        spec = ModelSpec(characteristics=(SG, AC, BL)[:k])
        weighting = (
            Weighting.EMPIRICAL_JOINT if case % 3 == 0 else Weighting.MARGINAL_INDEPENDENT
        )
        lambdas = {t: float(rng.uniform(0.25, 4)) for t in spec.terms}
        biases = {t: float(rng.uniform(-1, 1)) for t in spec.terms}
        if weighting is Weighting.MARGINAL_INDEPENDENT:
            pis = tuple(float(rng.uniform(0.1, 0.9)) for _ in range(k))
        else:
            raw = rng.uniform(0.05, 1, 1 << k)
            pis = tuple(raw / raw.sum())
        inp = DecompositionInput(
            tau2=float(rng.uniform(0.001, 0.3)),
            lambdas=lambdas,
            biases=biases,
            d=float(rng.uniform(-1, 1)),
            pis=pis,
            weighting=weighting,
        )
        closed = total_variance_general(inp, spec)
        value, se = mc_variance_oracle(inp, spec, n_draws=100_000, seed=1000 + case)
        assert abs(value - closed) < 4 * se, (case, value, closed, se)


def test_oracle_se_scaling(spec_sg):
    term = BiasTerm((SG,))
    inp = DecompositionInput(
        tau2=0.04, lambdas={term: 2.0}, biases={term: 0.2}, d=0.0, pis=(0.5,)
    )
    _, se_small = mc_variance_oracle(inp, spec_sg, n_draws=100_000, seed=42)
    _, se_big = mc_variance_oracle(inp, spec_sg, n_draws=10_000_000, seed=43)
    ratio = se_small / se_big
    assert 7.0 <= ratio <= 14.0


def test_oracle_rejects_tiny_draw_counts(spec_sg):
    term = BiasTerm((SG,))
    inp = DecompositionInput(
        tau2=0.04, lambdas={term: 1.0}, biases={term: 0.0}, d=0.0, pis=(0.5,)
    )
    with pytest.raises(ValueError):
        mc_variance_oracle(inp, spec_sg, n_draws=100, seed=1)


class _PointMassFit:
    def __init__(self, values):
        self.summaries = {
            name: PosteriorSummary(v, v, v, 0.0, 1.0) for name, v in values.items()
        }


def test_recovery_report_point_mass(spec_sg):
    truth = SimTruth.constant(spec_sg, lam=1.6, b0=-0.2, phi=0.3)
    fit = _PointMassFit(
        {
            "lambda[SG]": 1.6,
            "b0[SG]": -0.2,
            "phi2[SG]": 0.09,
            "mu_tau": truth.mu_tau,
            "sigma_tau": truth.sigma_tau,
        }
    )
    metrics = recovery_report(truth, fit)
    assert isinstance(metrics, RecoveryMetrics)
    assert metrics.coverage == 1.0
    assert all(row["abs_error"] == 0.0 for row in metrics.rows)


def test_recovery_report_missing_parameter(spec_sg):
    truth = SimTruth.constant(spec_sg)
    with pytest.raises(ValueError, match="no summary"):
        recovery_report(truth, _PointMassFit({"lambda[SG]": 1.0}))


def test_strong_truth_yields_larger_lambda_estimate(spec_sg):
    shape = SimShape(
        n_metas=40,
        trials_per_meta=(8, 10, 12),
        n_per_arm=(150, 250, 400),
        prob_high_or_unclear={c: 0.5 for c in Characteristic},
    )
    cfg = McmcConfig(n_iter=3000, n_burnin=500, n_chains=2, seed=9)
    medians = {}
    for label, lam in (("null", 1.0), ("strong", 3.0)):
        truth = SimTruth.constant(
            spec_sg, lam=lam, b0=0.0, phi=0.05,
            mu_tau=math.log(0.08), sigma_tau=0.3,
            baseline_logodds_mean=-0.4, baseline_logodds_sd=0.3, d_sd=0.2,
        )
        ds, _ = generate_dataset(truth, shape, spec_sg, seed=31)
        fit = run_analysis(spec_sg, ds, cfg)
        medians[label] = fit.summaries["lambda[SG]"].median
    assert medians["strong"] > medians["null"]
