"""Label-invariant bias/heterogeneity model algebra.

Trials are classed low risk vs high-or-unclear risk on up to three design
characteristics.  A trial's log odds ratio is drawn from a normal
distribution whose mean is the meta-analysis effect plus a sum of bias
terms, and whose variance is the low-risk heterogeneity tau2 multiplied by
one ratio per active bias term.  "Label-invariant" means the ratios are
unconstrained: flagged trials may be more or less heterogeneous than
low-risk ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import TYPE_CHECKING, Mapping

import numpy as np

if TYPE_CHECKING:
    from .dataset import Dataset

__all__ = [
    "Characteristic",
    "BiasCell",
    "BiasTerm",
    "Weighting",
    "Tau2Covariates",
    "PriorConfig",
    "ModelSpec",
    "ParameterState",
    "term_set",
    "active_terms",
    "cell_mean",
    "cell_variance",
    "log_likelihood_trial",
    "log_prior",
    "log_posterior",
]

TWO_PI = 6.283185307179586


class Characteristic(Enum):
    """Trial design characteristic judged for risk of bias."""

    SG = "SG"  # sequence generation
    AC = "AC"  # allocation concealment
    BL = "BL"  # blinding


#: Canonical ordering used whenever a characteristic set must be sorted.
CHARACTERISTIC_ORDER = (Characteristic.SG, Characteristic.AC, Characteristic.BL)


class Weighting(Enum):
    """How bias-cell weights are formed from a meta-analysis's flag pattern."""

    MARGINAL_INDEPENDENT = "marginal_independent"
    EMPIRICAL_JOINT = "empirical_joint"


class Tau2Covariates(Enum):
    """Covariates entering the regression for log heterogeneity."""

    NONE = "none"
    OUTCOME_TYPE = "outcome_type"


@dataclass(frozen=True)
class BiasTerm:
    """A main effect (singleton) or interaction (larger subset) bias term.

    ``chars`` is kept in canonical SG, AC, BL order regardless of how the
    term was constructed.
    """

    chars: tuple[Characteristic, ...]

    def __post_init__(self):
        if not self.chars:
            raise ValueError("bias term needs at least one characteristic")
        if len(set(self.chars)) != len(self.chars):
            raise ValueError(f"duplicate characteristics in term: {self.chars}")
        ordered = tuple(c for c in CHARACTERISTIC_ORDER if c in self.chars)
        object.__setattr__(self, "chars", ordered)

    @property
    def label(self) -> str:
        return "*".join(c.value for c in self.chars)

    @property
    def is_interaction(self) -> bool:
        return len(self.chars) > 1

    def __repr__(self):
        return f"BiasTerm({self.label})"


@dataclass(frozen=True)
class BiasCell:
    """One combination of dichotomized risk classes (True = high/unclear).

    Flag order follows the model spec's characteristic order.
    """

    flags: tuple[bool, ...]

    def __post_init__(self):
        if not 1 <= len(self.flags) <= 3:
            raise ValueError("cell must cover between 1 and 3 characteristics")

    @property
    def index(self) -> int:
        """Bitmask index: bit j set when characteristic j is flagged."""
        return sum(1 << j for j, f in enumerate(self.flags) if f)

    @classmethod
    def from_index(cls, idx: int, k: int) -> "BiasCell":
        return cls(tuple(bool(idx >> j & 1) for j in range(k)))


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters.

    Location parameters (trial baselines, effects, mean biases, the log-tau2
    regression coefficients) get vague normals; each heterogeneity ratio gets
    a log-normal prior; each between-meta bias variance an inverse-gamma with
    mass near zero; the log-tau2 spread a uniform.
    """

    location_prior_var: float = 1000.0
    lambda_log_mean: float = 0.0
    lambda_log_sd: float = 1.0
    phi2_shape: float = 0.001
    phi2_rate: float = 0.001
    baseline_prior_var: float = 1000.0
    mu_tau_prior_var: float = 1000.0
    sigma_tau_upper: float = 2.0

    def __post_init__(self):
        for name in (
            "location_prior_var",
            "lambda_log_sd",
            "phi2_shape",
            "phi2_rate",
            "baseline_prior_var",
            "mu_tau_prior_var",
            "sigma_tau_upper",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "location_prior_var": self.location_prior_var,
            "lambda_prior": {
                "log_mean": self.lambda_log_mean,
                "log_sd": self.lambda_log_sd,
            },
            "phi2_prior": {"shape": self.phi2_shape, "rate": self.phi2_rate},
            "baseline_prior_var": self.baseline_prior_var,
            "mu_tau_prior_var": self.mu_tau_prior_var,
            "sigma_tau_prior": {"lower": 0.0, "upper": self.sigma_tau_upper},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorConfig":
        return cls(
            location_prior_var=d.get("location_prior_var", 1000.0),
            lambda_log_mean=d.get("lambda_prior", {}).get("log_mean", 0.0),
            lambda_log_sd=d.get("lambda_prior", {}).get("log_sd", 1.0),
            phi2_shape=d.get("phi2_prior", {}).get("shape", 0.001),
            phi2_rate=d.get("phi2_prior", {}).get("rate", 0.001),
            baseline_prior_var=d.get("baseline_prior_var", 1000.0),
            mu_tau_prior_var=d.get("mu_tau_prior_var", 1000.0),
            sigma_tau_upper=d.get("sigma_tau_prior", {}).get("upper", 2.0),
        )


@dataclass(frozen=True)
class ModelSpec:
    """Which characteristics, interactions and covariates a fit includes."""

    characteristics: tuple[Characteristic, ...]
    include_interactions: bool = True
    tau2_covariates: Tau2Covariates = Tau2Covariates.NONE
    priors: PriorConfig = field(default_factory=PriorConfig)
    cell_weighting: Weighting = Weighting.MARGINAL_INDEPENDENT

    def __post_init__(self):
        chars = tuple(self.characteristics)
        if not 1 <= len(chars) <= 3:
            raise ValueError("model needs 1 to 3 characteristics")
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characteristics in model spec")
        object.__setattr__(self, "characteristics", chars)

    @property
    def k(self) -> int:
        return len(self.characteristics)

    @property
    def terms(self) -> tuple[BiasTerm, ...]:
        return term_set(self)

    @property
    def n_cells(self) -> int:
        return 1 << self.k

    def to_dict(self) -> dict:
        return {
            "characteristics": [c.value for c in self.characteristics],
            "include_interactions": self.include_interactions,
            "tau2_covariates": self.tau2_covariates.value,
            "priors": self.priors.to_dict(),
            "cell_weighting": self.cell_weighting.value,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(
            characteristics=tuple(Characteristic(c) for c in d["characteristics"]),
            include_interactions=d.get("include_interactions", True),
            tau2_covariates=Tau2Covariates(d.get("tau2_covariates", "none")),
            priors=PriorConfig.from_dict(d.get("priors", {})),
            cell_weighting=Weighting(d.get("cell_weighting", "marginal_independent")),
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def term_set(spec: ModelSpec) -> tuple[BiasTerm, ...]:
    """All bias terms of a spec, singletons first, then interactions by size.

    With interactions on, a K-characteristic model has 2^K - 1 terms (every
    nonempty subset); otherwise just the K main effects.
    """
    chars = spec.characteristics
    terms = [BiasTerm((c,)) for c in chars]
    if spec.include_interactions and len(chars) > 1:
        for size in range(2, len(chars) + 1):
            for combo in combinations(range(len(chars)), size):
                terms.append(BiasTerm(tuple(chars[j] for j in combo)))
    return tuple(terms)


def active_terms(cell: BiasCell, spec: ModelSpec) -> tuple[BiasTerm, ...]:
    """Terms contributing to a cell: those fully contained in its flagged set."""
    if len(cell.flags) != spec.k:
        raise ValueError(
            f"cell has {len(cell.flags)} flags, model has {spec.k} characteristics"
        )
    flagged = {c for c, f in zip(spec.characteristics, cell.flags) if f}
    return tuple(t for t in term_set(spec) if set(t.chars) <= flagged)


def cell_mean(
    d: float, biases: Mapping[BiasTerm, float], cell: BiasCell, spec: ModelSpec
) -> float:
    """Mean trial effect in a cell: d plus the sum of active bias terms."""
    total = d
    for t in active_terms(cell, spec):
        if t not in biases:
            raise KeyError(f"missing bias value for term {t.label}")
        total += biases[t]
    return total


def cell_variance(
    tau2: float, lambdas: Mapping[BiasTerm, float], cell: BiasCell, spec: ModelSpec
) -> float:
    """Trial-effect variance in a cell: tau2 times the active ratio product."""
    if tau2 <= 0:
        raise ValueError("tau2 must be positive")
    total = tau2
    for t in active_terms(cell, spec):
        if t not in lambdas:
            raise KeyError(f"missing ratio value for term {t.label}")
        lam = lambdas[t]
        if lam <= 0:
            raise ValueError(f"ratio for term {t.label} must be positive")
        total *= lam
    return total


def _log_expit(x: float) -> float:
    # log(1/(1+exp(-x))), stable over |x| up to ~700
    if x >= 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def _log_choose(n: int, r: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)


def log_likelihood_trial(trial, mu: float, theta: float) -> float:
    """Exact log likelihood of one trial's two binomial arms.

    Control events at probability expit(mu), treatment events at
    expit(mu + theta); includes the binomial coefficients.
    """
    if not (math.isfinite(mu) and math.isfinite(theta)):
        raise ValueError("mu and theta must be finite")
    ll = _log_choose(trial.n_ctrl, trial.events_ctrl)
    ll += trial.events_ctrl * _log_expit(mu)
    ll += (trial.n_ctrl - trial.events_ctrl) * _log_expit(-mu)
    eta = mu + theta
    ll += _log_choose(trial.n_treat, trial.events_treat)
    ll += trial.events_treat * _log_expit(eta)
    ll += (trial.n_treat - trial.events_treat) * _log_expit(-eta)
    return ll


@dataclass
class ParameterState:
    """One point in the joint parameter space.

    Array shapes: ``d``/``tau2`` per meta (M,), ``b`` (M, T) per meta and
    term, ``b0``/``phi2``/``lam`` per term (T,), ``theta``/``mu`` per trial
    (N,) in dataset order, ``beta`` the two outcome-type coefficients (used
    only when the spec includes them).
    """

    d: np.ndarray
    tau2: np.ndarray
    b: np.ndarray
    b0: np.ndarray
    phi2: np.ndarray
    lam: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    mu_tau: float
    sigma_tau: float
    beta: np.ndarray

    def validate(self, spec: ModelSpec, ds: "Dataset") -> None:
        n_meta = len(ds.metas)
        n_trial = ds.n_trials
        n_term = len(spec.terms)
        shapes = {
            "d": (self.d.shape, (n_meta,)),
            "tau2": (self.tau2.shape, (n_meta,)),
            "b": (self.b.shape, (n_meta, n_term)),
            "b0": (self.b0.shape, (n_term,)),
            "phi2": (self.phi2.shape, (n_term,)),
            "lam": (self.lam.shape, (n_term,)),
            "theta": (self.theta.shape, (n_trial,)),
            "mu": (self.mu.shape, (n_trial,)),
            "beta": (self.beta.shape, (2,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")
        if np.any(self.tau2 <= 0) or np.any(self.phi2 <= 0) or np.any(self.lam <= 0):
            raise ValueError("tau2, phi2 and lam must all be positive")
        if self.sigma_tau <= 0:
            raise ValueError("sigma_tau must be positive")

    def copy(self) -> "ParameterState":
        return ParameterState(
            d=self.d.copy(),
            tau2=self.tau2.copy(),
            b=self.b.copy(),
            b0=self.b0.copy(),
            phi2=self.phi2.copy(),
            lam=self.lam.copy(),
            theta=self.theta.copy(),
            mu=self.mu.copy(),
            mu_tau=self.mu_tau,
            sigma_tau=self.sigma_tau,
            beta=self.beta.copy(),
        )


def _norm_logpdf(x: float, mean: float, var: float) -> float:
    return -0.5 * (math.log(TWO_PI * var) + (x - mean) * (x - mean) / var)


def outcome_covariates(outcome) -> tuple[float, float]:
    """Indicator pair (objective-other, subjective); mortality is baseline."""
    from .dataset import OutcomeType

    return (
        1.0 if outcome is OutcomeType.OBJECTIVE_OTHER else 0.0,
        1.0 if outcome is OutcomeType.SUBJECTIVE else 0.0,
    )


def log_prior(state: ParameterState, spec: ModelSpec, ds: "Dataset") -> float:
    """Log joint density of all unknowns, likelihood excluded.

    Covers every layer of the hierarchy, including the trial-effect layer
    theta ~ N(cell mean, cell variance); adding the binomial log likelihood
    therefore gives the full joint.  Returns -inf outside the support.
    """
    from .dataset import trial_cell

    state.validate(spec, ds)
    pr = spec.priors
    if not 0.0 < state.sigma_tau < pr.sigma_tau_upper:
        return -math.inf

    terms = spec.terms
    lp = 0.0
    # global bias-term layer
    for t in range(len(terms)):
        lam = float(state.lam[t])
        x = math.log(lam)
        # log-normal density of lam itself (includes the 1/lam Jacobian)
        lp += _norm_logpdf(x, pr.lambda_log_mean, pr.lambda_log_sd**2) - x
        phi2 = float(state.phi2[t])
        lp += (
            pr.phi2_shape * math.log(pr.phi2_rate)
            - math.lgamma(pr.phi2_shape)
            - (pr.phi2_shape + 1.0) * math.log(phi2)
            - pr.phi2_rate / phi2
        )
        lp += _norm_logpdf(float(state.b0[t]), 0.0, pr.location_prior_var)

    # hyperparameters of the log-tau2 regression
    lp += _norm_logpdf(state.mu_tau, 0.0, pr.mu_tau_prior_var)
    lp -= math.log(pr.sigma_tau_upper)  # uniform density
    n_beta = 2 if spec.tau2_covariates is Tau2Covariates.OUTCOME_TYPE else 0
    for j in range(n_beta):
        lp += _norm_logpdf(float(state.beta[j]), 0.0, pr.mu_tau_prior_var)

    sig2 = state.sigma_tau * state.sigma_tau
    trial_idx = 0
    for m, meta in enumerate(ds.metas):
        lp += _norm_logpdf(float(state.d[m]), 0.0, pr.location_prior_var)
        x0, x1 = outcome_covariates(meta.outcome)
        linpred = state.mu_tau
        if n_beta:
            linpred += float(state.beta[0]) * x0 + float(state.beta[1]) * x1
        tau2 = float(state.tau2[m])
        lp += _norm_logpdf(math.log(tau2), linpred, sig2)
        for t in range(len(terms)):
            lp += _norm_logpdf(
                float(state.b[m, t]), float(state.b0[t]), float(state.phi2[t])
            )
        biases = {terms[t]: float(state.b[m, t]) for t in range(len(terms))}
        lambdas = {terms[t]: float(state.lam[t]) for t in range(len(terms))}
        for trial in meta.trials:
            cell = trial_cell(trial, spec.characteristics)
            mean = cell_mean(float(state.d[m]), biases, cell, spec)
            var = cell_variance(tau2, lambdas, cell, spec)
            lp += _norm_logpdf(float(state.theta[trial_idx]), mean, var)
            lp += _norm_logpdf(float(state.mu[trial_idx]), 0.0, pr.baseline_prior_var)
            trial_idx += 1
    return lp


def log_posterior(state: ParameterState, spec: ModelSpec, ds: "Dataset") -> float:
    """log prior plus the binomial log likelihood of every trial."""
    lp = log_prior(state, spec, ds)
    if not math.isfinite(lp):
        return lp
    trial_idx = 0
    for meta in ds.metas:
        for trial in meta.trials:
            lp += log_likelihood_trial(
                trial, float(state.mu[trial_idx]), float(state.theta[trial_idx])
            )
            trial_idx += 1
    return lp

