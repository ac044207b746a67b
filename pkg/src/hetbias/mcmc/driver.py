"""Chain orchestration: initial states, the sampling loop, pooling and DIC.

All randomness comes from a counter-based Philox generator keyed by
``seed XOR chain_index``, so runs reproduce bit-for-bit on any host and the
kernels themselves stay deterministic.  Proposal scales adapt in batches of
50 iterations during burn-in only; the post-burn-in transition kernel is
time-homogeneous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..dataset import Dataset, filter_eligible
from ..model import ModelSpec, ParameterState, Tau2Covariates, log_posterior, log_prior
from . import backends
from ._layout import ModelLayout
from .diagnostics import PosteriorSummary, summarize_param

__all__ = [
    "McmcConfig",
    "ChainSamples",
    "PosteriorSamples",
    "DicResult",
    "initial_state",
    "run_chain",
    "run_analysis",
    "dic",
    "RHAT_THRESHOLD",
]

_SEED_MASK = (1 << 64) - 1
_ADAPT_BATCH = 50
RHAT_THRESHOLD = 1.05


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 100_000
    n_burnin: int = 10_000
    n_chains: int = 2
    thin: int = 1
    seed: int = 0
    adapt_during_burnin: bool = True
    target_accept: float = 0.35

    def __post_init__(self):
        if self.n_iter <= 0:
            raise ValueError("n_iter must be positive")
        if self.n_burnin < 0:
            raise ValueError("n_burnin must be non-negative")
        if self.n_chains < 1:
            raise ValueError("need at least one chain")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")

    @property
    def n_draws(self) -> int:
        return self.n_iter // self.thin

    def to_dict(self) -> dict:
        return {
            "n_iter": self.n_iter,
            "n_burnin": self.n_burnin,
            "n_chains": self.n_chains,
            "thin": self.thin,
            "seed": self.seed,
            "adapt_during_burnin": self.adapt_during_burnin,
            "target_accept": self.target_accept,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "McmcConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _expit(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _empirical_logodds(events: float, n: float) -> float:
    # Haldane 0.5 continuity correction, used for initialization only
    return math.log((events + 0.5) / (n - events + 0.5))


def initial_state(
    spec: ModelSpec, ds: Dataset, chain_index: int, seed: int = 0
) -> ParameterState:
    """Deterministic initial state for one chain.

    Chain 0 is central: trial effects and baselines at their empirical log
    odds (ratios), per-meta effects at the mean over the all-low cell
    (falling back to all trials), ratios at 1, tau2 at 0.04.  Later chains
    disperse: every location shifts by +-2 (sign alternating with chain
    index) and every scale parameter is multiplied by 4 to the same sign;
    the tau2-spread moves by +-2 on its logit scale.
    """
    layout = ModelLayout.build(spec, ds)
    n, m, t = layout.n_trials, layout.n_metas, layout.n_terms
    theta = np.empty(n)
    mu = np.empty(n)
    for i in range(n):
        mu[i] = _empirical_logodds(layout.events_ctrl[i], layout.size_ctrl[i])
        theta[i] = (
            _empirical_logodds(layout.events_treat[i], layout.size_treat[i]) - mu[i]
        )
    d = np.empty(m)
    for j in range(m):
        i0, i1 = layout.meta_start[j], layout.meta_start[j + 1]
        cells = layout.cell_of[i0:i1]
        low = theta[i0:i1][cells == 0]
        d[j] = low.mean() if low.size else theta[i0:i1].mean()

    sigma_tau0 = 0.5
    state = ParameterState(
        d=d,
        tau2=np.full(m, 0.04),
        b=np.zeros((m, t)),
        b0=np.zeros(t),
        phi2=np.full(t, 0.01),
        lam=np.ones(t),
        theta=theta,
        mu=mu,
        mu_tau=math.log(0.04),
        sigma_tau=sigma_tau0,
        beta=np.zeros(2),
    )
    if chain_index >= 1:
        s = 1.0 if chain_index % 2 == 1 else -1.0
        factor = 4.0**s
        state.theta += 2.0 * s
        state.mu += 2.0 * s
        state.d += 2.0 * s
        state.b += 2.0 * s
        state.b0 += 2.0 * s
        state.mu_tau += 2.0 * s
        if spec.tau2_covariates is Tau2Covariates.OUTCOME_TYPE:
            state.beta += 2.0 * s
        state.lam *= factor
        state.tau2 *= factor
        state.phi2 *= factor
        upper = spec.priors.sigma_tau_upper
        state.sigma_tau = upper * _expit(_logit(sigma_tau0 / upper) + 2.0 * s)
    return state


@dataclass
class ChainSamples:
    """Post-burn-in draws of one chain plus sampler bookkeeping.

    Draw matrices are indexed (draw, ...): ``d``/``tau2`` are (n_draws, M),
    ``b`` is (n_draws, M, T), ``lam``/``b0``/``phi2`` are (n_draws, T).
    ``draws`` maps parameter names to 1-D views of these matrices.
    """

    chain_index: int
    seed: int
    backend: str
    n_draws: int
    meta_ids: tuple[str, ...]
    term_labels: tuple[str, ...]
    d: np.ndarray
    tau2: np.ndarray
    b: np.ndarray
    lam: np.ndarray
    b0: np.ndarray
    phi2: np.ndarray
    mu_tau: np.ndarray
    sigma_tau: np.ndarray
    beta: np.ndarray
    deviance: np.ndarray
    fitted_ctrl_sum: np.ndarray
    fitted_treat_sum: np.ndarray
    acceptance: dict = field(default_factory=dict)
    scales_after_burnin: dict = field(default_factory=dict)
    scales_final: dict = field(default_factory=dict)
    n_beta: int = 0

    @property
    def draws(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for t, label in enumerate(self.term_labels):
            out[f"lambda[{label}]"] = self.lam[:, t]
        for t, label in enumerate(self.term_labels):
            out[f"b0[{label}]"] = self.b0[:, t]
        for t, label in enumerate(self.term_labels):
            out[f"phi2[{label}]"] = self.phi2[:, t]
        out["mu_tau"] = self.mu_tau
        out["sigma_tau"] = self.sigma_tau
        if self.n_beta:
            out["beta[objective]"] = self.beta[:, 0]
            out["beta[subjective]"] = self.beta[:, 1]
        for j, mid in enumerate(self.meta_ids):
            out[f"d[{mid}]"] = self.d[:, j]
        for j, mid in enumerate(self.meta_ids):
            out[f"tau2[{mid}]"] = self.tau2[:, j]
        for t, label in enumerate(self.term_labels):
            for j, mid in enumerate(self.meta_ids):
                out[f"b[{label}][{mid}]"] = self.b[:, j, t]
        return out


@dataclass
class PosteriorSamples:
    chains: tuple[ChainSamples, ...]
    spec: ModelSpec
    config: McmcConfig
    meta_ids: tuple[str, ...]
    term_labels: tuple[str, ...]
    summaries: dict[str, PosteriorSummary]
    monitored: tuple[str, ...]
    flagged: tuple[str, ...]
    r_hat_available: bool

    def pooled(self, name: str) -> np.ndarray:
        return np.concatenate([c.draws[name] for c in self.chains])

    def pooled_matrix(self, attr: str) -> np.ndarray:
        return np.concatenate([getattr(c, attr) for c in self.chains], axis=0)

    @property
    def n_draws_total(self) -> int:
        return sum(c.n_draws for c in self.chains)


def _expit_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _deviance_arm(r: np.ndarray, n: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    rhat = n * p
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(r > 0, r * np.log(r / rhat), 0.0)
        t2 = np.where(n - r > 0, (n - r) * np.log((n - r) / (n - rhat)), 0.0)
    return 2.0 * float(np.sum(t1 + t2))


def residual_deviance(layout: ModelLayout, p_ctrl: np.ndarray, p_treat: np.ndarray) -> float:
    """Saturated binomial deviance of fitted arm probabilities."""
    return _deviance_arm(layout.events_ctrl, layout.size_ctrl, p_ctrl) + _deviance_arm(
        layout.events_treat, layout.size_treat, p_treat
    )


def run_chain(
    spec: ModelSpec,
    ds: Dataset,
    cfg: McmcConfig,
    chain_index: int,
    backend: str | None = None,
    likelihood_on: bool = True,
) -> ChainSamples:
    """Run one chain; reproducible bit-for-bit given (spec, ds, cfg, index)."""
    if chain_index >= cfg.n_chains:
        raise ValueError("chain_index out of range")
    result = filter_eligible(ds, spec.characteristics)
    if result.excluded:
        raise ValueError(
            "dataset fails eligibility for this model: "
            + "; ".join(f"{mid}: {why}" for mid, why in result.excluded)
        )

    layout = ModelLayout.build(spec, ds)
    state = initial_state(spec, ds, chain_index, cfg.seed)
    lp0 = (
        log_posterior(state, spec, ds) if likelihood_on else log_prior(state, spec, ds)
    )
    if not math.isfinite(lp0):
        raise ValueError(f"non-finite posterior at initial state of chain {chain_index}")

    pr = spec.priors
    n, m, t = layout.n_trials, layout.n_metas, layout.n_terms
    like_on = 1 if likelihood_on else 0

    theta = state.theta.copy()
    mu = state.mu.copy()
    llc = np.zeros(n)
    llt = np.zeros(n)
    d = state.d.copy()
    log_tau2 = np.log(state.tau2)
    b = state.b.copy()
    b0 = state.b0.copy()
    phi2 = state.phi2.copy()
    log_lam = np.log(state.lam)
    hyper = np.array(
        [
            state.mu_tau,
            state.beta[0],
            state.beta[1],
            _logit(state.sigma_tau / pr.sigma_tau_upper),
        ]
    )
    lam_val = np.empty(t)
    cell_lamprod = np.empty(layout.n_cells)
    tau2_val = np.empty(m)

    s_mu = np.full(n, 0.5)
    s_th = np.full(n, 0.5)
    s_lam = np.full(t, 0.5)
    s_tau = np.full(m, 0.5)
    s_hyper = np.full(4, 0.5)
    a_mu = np.zeros(n, dtype=np.int64)
    a_th = np.zeros(n, dtype=np.int64)
    a_lam = np.zeros(t, dtype=np.int64)
    a_tau = np.zeros(m, dtype=np.int64)
    a_hyper = np.zeros(4, dtype=np.int64)

    z_mu = np.empty(n)
    u_mu = np.empty(n)
    z_th = np.empty(n)
    u_th = np.empty(n)
    z_loc = np.empty(m * (1 + t))
    z_b0 = np.empty(t)
    g_phi = np.empty(t)
    z_lam = np.empty(t)
    u_lam = np.empty(t)
    z_tau = np.empty(m)
    u_tau = np.empty(m)
    z_hyp = np.empty(4)
    u_hyp = np.empty(4)

    kern = backends.get_kernel(backend)
    kern.init_loglik(
        layout.events_ctrl,
        layout.size_ctrl,
        layout.events_treat,
        layout.size_treat,
        mu,
        theta,
        llc,
        llt,
        like_on,
    )

    rng = np.random.Generator(np.random.Philox(key=(cfg.seed ^ chain_index) & _SEED_MASK))
    phi_shape_post = pr.phi2_shape + 0.5 * m
    lam_lvar = pr.lambda_log_sd**2

    n_draws = cfg.n_draws
    draws_d = np.empty((n_draws, m))
    draws_tau2 = np.empty((n_draws, m))
    draws_b = np.empty((n_draws, m, t))
    draws_lam = np.empty((n_draws, t))
    draws_b0 = np.empty((n_draws, t))
    draws_phi2 = np.empty((n_draws, t))
    draws_mu_tau = np.empty(n_draws)
    draws_sigma = np.empty(n_draws)
    draws_beta = np.empty((n_draws, 2))
    deviance = np.empty(n_draws)
    fitted_ctrl_sum = np.zeros(n)
    fitted_treat_sum = np.zeros(n)

    scale_arrays = (s_mu, s_th, s_lam, s_tau, s_hyper)
    count_arrays = (a_mu, a_th, a_lam, a_tau, a_hyper)

    def snapshot() -> dict:
        return {
            "mu": s_mu.copy(),
            "theta": s_th.copy(),
            "lambda": s_lam.copy(),
            "tau2": s_tau.copy(),
            "hyper": s_hyper.copy(),
        }

    scales_after_burnin = snapshot() if cfg.n_burnin == 0 else None
    batch = 0
    total = cfg.n_burnin + cfg.n_iter
    for it in range(1, total + 1):
        rng.standard_normal(out=z_mu)
        rng.random(out=u_mu)
        rng.standard_normal(out=z_th)
        rng.random(out=u_th)
        rng.standard_normal(out=z_loc)
        rng.standard_normal(out=z_b0)
        g_phi[...] = rng.standard_gamma(phi_shape_post, size=t)
        rng.standard_normal(out=z_lam)
        rng.random(out=u_lam)
        rng.standard_normal(out=z_tau)
        rng.random(out=u_tau)
        rng.standard_normal(out=z_hyp)
        rng.random(out=u_hyp)

        kern.sweep(
            layout.events_ctrl, layout.size_ctrl, layout.events_treat,
            layout.size_treat, layout.meta_of, layout.cell_of, layout.meta_start,
            layout.cell_terms, layout.covariates,
            theta, mu, llc, llt, d, log_tau2, b, b0, phi2, log_lam, hyper,
            lam_val, cell_lamprod, tau2_val,
            s_mu, s_th, s_lam, s_tau, s_hyper,
            z_mu, u_mu, z_th, u_th, z_loc, z_b0, g_phi, z_lam, u_lam,
            z_tau, u_tau, z_hyp, u_hyp,
            a_mu, a_th, a_lam, a_tau, a_hyper,
            pr.location_prior_var, pr.baseline_prior_var, pr.mu_tau_prior_var,
            pr.lambda_log_mean, lam_lvar, pr.phi2_rate, pr.sigma_tau_upper,
            like_on, layout.n_beta,
        )

        if it <= cfg.n_burnin:
            if cfg.adapt_during_burnin and it % _ADAPT_BATCH == 0:
                batch += 1
                delta = min(0.5, 1.0 / math.sqrt(batch))
                up = math.exp(delta)
                down = math.exp(-delta)
                for scales, counts in zip(scale_arrays, count_arrays):
                    rates = counts / _ADAPT_BATCH
                    scales *= np.where(rates > cfg.target_accept, up, down)
                    counts[:] = 0
            if it == cfg.n_burnin:
                scales_after_burnin = snapshot()
                for counts in count_arrays:
                    counts[:] = 0
            continue

        post_it = it - cfg.n_burnin
        if post_it % cfg.thin == 0:
            j = post_it // cfg.thin - 1
            draws_d[j] = d
            draws_tau2[j] = np.exp(log_tau2)
            draws_b[j] = b
            draws_lam[j] = np.exp(log_lam)
            draws_b0[j] = b0
            draws_phi2[j] = phi2
            draws_mu_tau[j] = hyper[0]
            draws_sigma[j] = pr.sigma_tau_upper * _expit(float(hyper[3]))
            draws_beta[j] = hyper[1:3]
            p_c = _expit_array(mu)
            p_t = _expit_array(mu + theta)
            deviance[j] = residual_deviance(layout, p_c, p_t)
            fitted_ctrl_sum += p_c
            fitted_treat_sum += p_t

    denom = float(cfg.n_iter)
    acceptance = {
        "mu": float(a_mu.sum()) / (n * denom),
        "theta": float(a_th.sum()) / (n * denom),
        "lambda": float(a_lam.sum()) / (t * denom),
        "tau2": float(a_tau.sum()) / (m * denom),
        "mu_tau": float(a_hyper[0]) / denom,
        "beta": (
            float(a_hyper[1] + a_hyper[2]) / (2 * denom) if layout.n_beta else None
        ),
        "sigma_tau": float(a_hyper[3]) / denom,
    }
    return ChainSamples(
        chain_index=chain_index,
        seed=cfg.seed,
        backend=kern.BACKEND,
        n_draws=n_draws,
        meta_ids=layout.meta_ids,
        term_labels=layout.term_labels,
        d=draws_d,
        tau2=draws_tau2,
        b=draws_b,
        lam=draws_lam,
        b0=draws_b0,
        phi2=draws_phi2,
        mu_tau=draws_mu_tau,
        sigma_tau=draws_sigma,
        beta=draws_beta,
        deviance=deviance,
        fitted_ctrl_sum=fitted_ctrl_sum,
        fitted_treat_sum=fitted_treat_sum,
        acceptance=acceptance,
        scales_after_burnin=scales_after_burnin,
        scales_final=snapshot(),
        n_beta=layout.n_beta,
    )


def monitored_names(term_labels: Sequence[str], n_beta: int) -> tuple[str, ...]:
    names = [f"lambda[{t}]" for t in term_labels]
    names += [f"b0[{t}]" for t in term_labels]
    names += [f"phi2[{t}]" for t in term_labels]
    names += ["mu_tau", "sigma_tau"]
    if n_beta:
        names += ["beta[objective]", "beta[subjective]"]
    return tuple(names)


def run_analysis(
    spec: ModelSpec,
    ds: Dataset,
    cfg: McmcConfig,
    backend: str | None = None,
    likelihood_on: bool = True,
) -> PosteriorSamples:
    """Run all chains, pool draws, and summarize every stored parameter.

    R-hat is computed across chains and reported as unavailable (None) for
    single-chain runs; monitored global parameters exceeding the 1.05
    threshold are flagged.
    """
    chains = tuple(
        run_chain(spec, ds, cfg, i, backend=backend, likelihood_on=likelihood_on)
        for i in range(cfg.n_chains)
    )
    names = list(chains[0].draws.keys())
    summaries: dict[str, PosteriorSummary] = {}
    for name in names:
        per_chain = [c.draws[name] for c in chains]
        pooled = np.concatenate(per_chain)
        summaries[name] = summarize_param(pooled, per_chain)
    monitored = monitored_names(chains[0].term_labels, chains[0].n_beta)
    flagged = tuple(
        nm
        for nm in monitored
        if summaries[nm].r_hat is not None and summaries[nm].r_hat > RHAT_THRESHOLD
    )
    return PosteriorSamples(
        chains=chains,
        spec=spec,
        config=cfg,
        meta_ids=chains[0].meta_ids,
        term_labels=chains[0].term_labels,
        summaries=summaries,
        monitored=monitored,
        flagged=flagged,
        r_hat_available=cfg.n_chains >= 2,
    )


@dataclass(frozen=True)
class DicResult:
    d_res_bar: float
    p_d: float
    dic: float

    def to_dict(self) -> dict:
        return {"d_res_bar": self.d_res_bar, "p_d": self.p_d, "dic": self.dic}


def dic(samples: PosteriorSamples, ds: Dataset, spec: ModelSpec) -> DicResult:
    """Deviance information criterion from retained fitted probabilities.

    The plug-in deviance is evaluated at the posterior mean of the fitted
    arm probabilities (not of the underlying parameters); the effective
    parameter count is the mean residual deviance minus that plug-in, and
    DIC is their sum, so dic == d_res_bar + p_d holds exactly.
    """
    layout = ModelLayout.build(spec, ds)
    devs = np.concatenate([c.deviance for c in samples.chains])
    d_res_bar = float(devs.mean())
    total = samples.n_draws_total
    p_ctrl = sum(c.fitted_ctrl_sum for c in samples.chains) / total
    p_treat = sum(c.fitted_treat_sum for c in samples.chains) / total
    plugin = residual_deviance(layout, p_ctrl, p_treat)
    p_d = d_res_bar - plugin
    return DicResult(d_res_bar=d_res_bar, p_d=p_d, dic=d_res_bar + p_d)
