"""Metropolis-within-Gibbs sampling with a compiled core and a pure fallback."""

from .backends import HAVE_COMPILED, available_backends, default_backend, get_kernel
from .diagnostics import PosteriorSummary, gelman_rubin, mc_error, summarize_param
from .driver import (
    RHAT_THRESHOLD,
    ChainSamples,
    DicResult,
    McmcConfig,
    PosteriorSamples,
    dic,
    initial_state,
    run_analysis,
    run_chain,
)

__all__ = [
    "HAVE_COMPILED",
    "available_backends",
    "default_backend",
    "get_kernel",
    "PosteriorSummary",
    "gelman_rubin",
    "mc_error",
    "summarize_param",
    "RHAT_THRESHOLD",
    "ChainSamples",
    "DicResult",
    "McmcConfig",
    "PosteriorSamples",
    "dic",
    "initial_state",
    "run_analysis",
    "run_chain",
]
