"""hetbias: how much meta-analysis heterogeneity do flagged trials explain?

Hierarchical models for collections of meta-analyses with binary outcomes
and risk-of-bias judgments.  Fits estimate, per design characteristic, the
ratio by which between-trial heterogeneity changes for high/unclear-risk
trials and the average bias they carry, then decompose each meta-analysis's
total heterogeneity into a bias-attributable share and a residual.
"""

__version__ = "0.1.0"

from . import dataset, decompose, mcmc, model, simulate  # noqa: F401
