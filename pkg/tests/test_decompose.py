import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetbias.dataset import Dataset, MetaAnalysis, OutcomeType, RoBJudgment
from hetbias.decompose import (
    DecompositionInput,
    cell_weights,
    cross_meta_summary,
    figure1_data,
    per_meta_decomposition,
    proportion_explained,
    total_variance_bivariable,
    total_variance_general,
    total_variance_univariable,
)
from hetbias.model import BiasTerm, Characteristic, ModelSpec, Weighting
from hetbias.simulate import mc_variance_oracle

from conftest import make_trial

SG, AC, BL = Characteristic.SG, Characteristic.AC, Characteristic.BL


def _random_input(rng, k, weighting=Weighting.MARGINAL_INDEPENDENT):
    spec = ModelSpec(characteristics=(SG, AC, BL)[:k])
    lambdas = {t: float(rng.uniform(0.25, 4.0)) for t in spec.terms}
    biases = {t: float(rng.uniform(-1.0, 1.0)) for t in spec.terms}
    if weighting is Weighting.MARGINAL_INDEPENDENT:
        pis = tuple(float(rng.uniform(0.1, 0.9)) for _ in range(k))
    else:
        raw = rng.uniform(0.05, 1.0, 1 << k)
        pis = tuple(raw / raw.sum())
    inp = DecompositionInput(
        tau2=float(rng.uniform(0.001, 0.3)),
        lambdas=lambdas,
        biases=biases,
        d=float(rng.uniform(-1.0, 1.0)),
        pis=pis,
        weighting=weighting,
    )
    return inp, spec


def test_univariable_closed_form_examples():
    assert total_variance_univariable(0.05, 1.0, 0.0, 0.37) == pytest.approx(0.05, abs=1e-15)
    assert total_variance_univariable(0.05, 2.5, 0.4, 0.0) == pytest.approx(0.05, abs=1e-15)
    assert total_variance_univariable(0.05, 2.5, 0.4, 1.0) == pytest.approx(0.125, abs=1e-15)
    assert total_variance_univariable(0.04, 2.0, 0.2, 0.5) == pytest.approx(0.07, abs=1e-14)


def test_univariable_against_monte_carlo_oracle():
    spec = ModelSpec(characteristics=(SG,))
    inp = DecompositionInput(
        tau2=0.04,
        lambdas={BiasTerm((SG,)): 2.0},
        biases={BiasTerm((SG,)): 0.2},
        d=0.3,
        pis=(0.5,),
    )
    value, se = mc_variance_oracle(inp, spec, n_draws=10_000_000, seed=99)
    assert abs(value - 0.07) < 4 * se


def test_bivariable_cancellation_when_null():
    # unit ratios and zero biases leave tau2; d terms cancel algebraically
    for d in (0.0, 0.5, 7.0):
        got = total_variance_bivariable(0.04, (1, 1, 1), (0, 0, 0), d, 0.5, 0.5)
        assert got == pytest.approx(0.04, abs=1e-12)


def test_bivariable_hand_case():
    got = total_variance_bivariable(0.04, (1, 1, 1), (0.2, 0.0, 0.0), 0.3, 0.5, 0.5)
    assert got == pytest.approx(0.05, abs=1e-12)


def test_bivariable_translation_invariance(rng):
    for _ in range(50):
        lams = tuple(rng.uniform(0.25, 4, 3))
        bs = tuple(rng.uniform(-1, 1, 3))
        tau2 = rng.uniform(0.001, 0.3)
        pi1, pi2 = rng.uniform(0.1, 0.9, 2)
        v0 = total_variance_bivariable(tau2, lams, bs, 0.0, pi1, pi2)
        v7 = total_variance_bivariable(tau2, lams, bs, 7.0, pi1, pi2)
        assert v0 == pytest.approx(v7, abs=1e-9)


def test_general_equals_univariable_closed_form(rng):
    spec = ModelSpec(characteristics=(SG,))
    term = BiasTerm((SG,))
    for _ in range(100):
        tau2 = rng.uniform(0.001, 0.3)
        lam = rng.uniform(0.25, 4)
        b = rng.uniform(-1, 1)
        pi = rng.uniform(0.1, 0.9)
        inp = DecompositionInput(
            tau2=tau2, lambdas={term: lam}, biases={term: b}, d=rng.uniform(-1, 1),
            pis=(pi,),
        )
        assert total_variance_general(inp, spec) == pytest.approx(
            total_variance_univariable(tau2, lam, b, pi), abs=1e-10
        )


def test_general_equals_bivariable_closed_form(rng):
    spec = ModelSpec(characteristics=(SG, AC))
    t1, t2, t12 = spec.terms
    for _ in range(100):
        inp, _ = _random_input(rng, 2)
        expected = total_variance_bivariable(
            inp.tau2,
            (inp.lambdas[t1], inp.lambdas[t2], inp.lambdas[t12]),
            (inp.biases[t1], inp.biases[t2], inp.biases[t12]),
            inp.d,
            inp.pis[0],
            inp.pis[1],
        )
        assert total_variance_general(inp, spec) == pytest.approx(expected, abs=1e-10)


def test_general_k3_against_monte_carlo(rng):
    inp, spec = _random_input(np.random.default_rng(2222), 3)
    closed = total_variance_general(inp, spec)
    value, se = mc_variance_oracle(inp, spec, n_draws=1_000_000, seed=5)
    assert abs(value - closed) < 4 * se


def test_general_empirical_joint_weighting(rng):
    inp, spec = _random_input(
        np.random.default_rng(777), 2, weighting=Weighting.EMPIRICAL_JOINT
    )
    closed = total_variance_general(inp, spec)
    value, se = mc_variance_oracle(inp, spec, n_draws=500_000, seed=8)
    assert abs(value - closed) < 4 * se


def test_general_exceeds_weighted_cell_variance(rng):
    for k in (1, 2, 3):
        inp, spec = _random_input(rng, k)
        w = cell_weights(inp.pis, k, inp.weighting)
        from hetbias.model import BiasCell, cell_variance

        within = sum(
            w[c] * cell_variance(inp.tau2, inp.lambdas, BiasCell.from_index(c, k), spec)
            for c in range(1 << k)
        )
        assert total_variance_general(inp, spec) >= within - 1e-12


def test_general_translation_invariance(rng):
    for k in (1, 2, 3):
        inp, spec = _random_input(rng, k)
        shifted = DecompositionInput(
            tau2=inp.tau2, lambdas=inp.lambdas, biases=inp.biases,
            d=inp.d + 11.0, pis=inp.pis, weighting=inp.weighting,
        )
        assert total_variance_general(inp, spec) == pytest.approx(
            total_variance_general(shifted, spec), rel=1e-9, abs=1e-9
        )


def test_general_single_cell_weight():
    spec = ModelSpec(characteristics=(SG, AC))
    lambdas = {t: 1.7 for t in spec.terms}
    biases = {t: 0.4 for t in spec.terms}
    weights = (0.0, 0.0, 0.0, 1.0)
    inp = DecompositionInput(
        tau2=0.05, lambdas=lambdas, biases=biases, d=0.2, pis=weights,
        weighting=Weighting.EMPIRICAL_JOINT,
    )
    # all mass on the both-flagged cell: variance tau2 * 1.7^3
    assert total_variance_general(inp, spec) == pytest.approx(
        0.05 * 1.7**3, rel=1e-12
    )


def test_proportion_explained_examples():
    assert proportion_explained(0.05, 0.04) == 0.0
    assert proportion_explained(0.04, 0.07) == pytest.approx(1 - 0.04 / 0.07)
    assert proportion_explained(0.04, 0.04) == 0.0
    with pytest.raises(ValueError):
        proportion_explained(0.0, 0.1)


@given(
    tau2=st.floats(1e-4, 10.0),
    total=st.floats(1e-4, 10.0),
)
@settings(max_examples=200, deadline=None)
def test_proportion_explained_always_in_unit_interval(tau2, total):
    assert 0.0 <= proportion_explained(tau2, total) <= 1.0


def test_proportion_explained_monotone_in_total(rng):
    tau2 = 0.05
    totals = np.sort(rng.uniform(0.001, 1.0, 100))
    values = [proportion_explained(tau2, t) for t in totals]
    assert all(b >= a for a, b in zip(values, values[1:]))


def _two_meta_ds():
    metas = []
    for mid in ("m1", "m2"):
        trials = (
            make_trial(meta_id=mid, trial_id="t1"),
            make_trial(meta_id=mid, trial_id="t2", sg=RoBJudgment.HIGH),
            make_trial(meta_id=mid, trial_id="t3", sg=RoBJudgment.UNCLEAR),
            make_trial(meta_id=mid, trial_id="t4"),
        )
        metas.append(
            MetaAnalysis(meta_id=mid, trials=trials, outcome=OutcomeType.MORTALITY)
        )
    return Dataset(metas=tuple(metas))


class _FakeSamples:
    def __init__(self, lam, d, tau2, b):
        self.lam = lam
        self.d = d
        self.tau2 = tau2
        self.b = b

    def pooled_matrix(self, attr):
        return getattr(self, attr)


def test_per_meta_decomposition_homogeneous_draws_give_zero():
    ds = _two_meta_ds()
    spec = ModelSpec(characteristics=(SG,))
    n = 50
    samples = _FakeSamples(
        lam=np.ones((n, 1)),
        d=np.full((n, 2), 0.3),
        tau2=np.full((n, 2), 0.06),
        b=np.zeros((n, 2, 1)),
    )
    result = per_meta_decomposition(samples, ds, spec)
    for m in result.per_meta:
        assert m.proportion_explained == 0.0
        assert m.tau2_median == pytest.approx(m.tau2_total_median, rel=1e-12)
    points, n_below = figure1_data(result)
    assert n_below == 0
    for _, tau2, total in points:
        assert tau2 == pytest.approx(total, rel=1e-12)


def test_per_meta_decomposition_single_draw_equals_formula():
    ds = _two_meta_ds()
    spec = ModelSpec(characteristics=(SG,))
    lam, d, tau2, b = 1.8, 0.25, 0.05, 0.4
    samples = _FakeSamples(
        lam=np.array([[lam]]),
        d=np.array([[d, d]]),
        tau2=np.array([[tau2, tau2]]),
        b=np.array([[[b], [b]]]),
    )
    result = per_meta_decomposition(samples, ds, spec)
    expected_total = total_variance_univariable(tau2, lam, b, 0.5)
    for m in result.per_meta:
        assert m.tau2_total_median == pytest.approx(expected_total, rel=1e-12)
        assert m.proportion_explained == pytest.approx(
            proportion_explained(tau2, expected_total), rel=1e-12
        )


def test_per_meta_decomposition_clamps_per_draw():
    ds = _two_meta_ds()
    spec = ModelSpec(characteristics=(SG,))
    # strong negative-bias draws: total below tau2, so clamped draws are 0
    n = 21
    lam = np.full((n, 1), 0.2)
    samples = _FakeSamples(
        lam=lam,
        d=np.zeros((n, 2)),
        tau2=np.full((n, 2), 0.05),
        b=np.zeros((n, 2, 1)),
    )
    result = per_meta_decomposition(samples, ds, spec)
    for m in result.per_meta:
        assert m.proportion_explained == 0.0
        assert m.proportion_unclamped_median < 0.0


def test_cross_meta_summary_order_statistics():
    med, lo, hi = cross_meta_summary([0.0, 0.25, 0.5, 0.75, 1.0])
    assert med == 0.5
    assert lo == pytest.approx(0.025)
    assert hi == pytest.approx(0.975)
    med, lo, hi = cross_meta_summary([0.4, 0.4, 0.4])
    assert (med, lo, hi) == (0.4, 0.4, 0.4)
    with pytest.raises(ValueError):
        cross_meta_summary([])


def test_decomposition_input_validation():
    spec = ModelSpec(characteristics=(SG,))
    with pytest.raises(ValueError):
        DecompositionInput(
            tau2=-1.0, lambdas={BiasTerm((SG,)): 1.0}, biases={BiasTerm((SG,)): 0.0},
            d=0.0, pis=(0.5,),
        )
    with pytest.raises(ValueError):
        DecompositionInput(
            tau2=0.1, lambdas={BiasTerm((SG,)): 1.0}, biases={BiasTerm((SG,)): 0.0},
            d=0.0, pis=(0.5, 0.6), weighting=Weighting.EMPIRICAL_JOINT,
        )
