import numpy as np
import pytest

from hetbias.dataset import OutcomeType, RoBJudgment, TrialRecord
from hetbias.model import Characteristic, ModelSpec
from hetbias.simulate import SimShape, SimTruth, generate_dataset


def make_trial(
    meta_id="m1",
    trial_id="t1",
    events_treat=5,
    n_treat=20,
    events_ctrl=4,
    n_ctrl=20,
    sg=RoBJudgment.LOW,
    ac=RoBJudgment.LOW,
    bl=RoBJudgment.LOW,
    outcome=OutcomeType.MORTALITY,
):
    return TrialRecord(
        meta_id=meta_id,
        trial_id=trial_id,
        events_treat=events_treat,
        n_treat=n_treat,
        events_ctrl=events_ctrl,
        n_ctrl=n_ctrl,
        rob_sg=sg,
        rob_ac=ac,
        rob_bl=bl,
        outcome=outcome,
    )


@pytest.fixture(scope="session")
def spec_sg():
    return ModelSpec(characteristics=(Characteristic.SG,))


@pytest.fixture(scope="session")
def small_ds(spec_sg):
    truth = SimTruth.constant(spec_sg, lam=1.5, b0=-0.2, phi=0.1)
    shape = SimShape(
        n_metas=6,
        trials_per_meta=(4, 6, 10),
        n_per_arm=(20, 60, 200),
        prob_high_or_unclear={c: 0.5 for c in Characteristic},
    )
    ds, _ = generate_dataset(truth, shape, spec_sg, seed=42)
    return ds


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(314159)
