"""Flat array layout shared by the sampling kernels.

Trials are packed meta-by-meta in dataset order.  Bias cells are bitmask
indexed over the spec's characteristic order; each cell maps to a bitmask of
active term indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset import Dataset, trial_cell
from ..model import ModelSpec, Tau2Covariates, active_terms, outcome_covariates, term_set


@dataclass(frozen=True)
class ModelLayout:
    spec: ModelSpec
    meta_ids: tuple[str, ...]
    term_labels: tuple[str, ...]
    n_trials: int
    n_metas: int
    n_terms: int
    n_cells: int
    n_beta: int
    # per trial, packed meta-contiguously
    events_ctrl: np.ndarray  # float64
    size_ctrl: np.ndarray
    events_treat: np.ndarray
    size_treat: np.ndarray
    meta_of: np.ndarray  # int32
    cell_of: np.ndarray  # int32
    meta_start: np.ndarray  # int32, len n_metas + 1
    cell_terms: np.ndarray  # int32 bitmask of term indices per cell
    covariates: np.ndarray  # (n_metas, 2) float64

    @classmethod
    def build(cls, spec: ModelSpec, ds: Dataset) -> "ModelLayout":
        terms = term_set(spec)
        term_index = {t: i for i, t in enumerate(terms)}
        n_cells = spec.n_cells
        cell_terms = np.zeros(n_cells, dtype=np.int32)
        from ..model import BiasCell

        for c in range(n_cells):
            mask = 0
            for t in active_terms(BiasCell.from_index(c, spec.k), spec):
                mask |= 1 << term_index[t]
            cell_terms[c] = mask

        with_covariates = spec.tau2_covariates is Tau2Covariates.OUTCOME_TYPE
        ec, sc, et, st, meta_of, cell_of = [], [], [], [], [], []
        meta_start = [0]
        covariates = []
        for m, meta in enumerate(ds.metas):
            for trial in meta.trials:
                ec.append(trial.events_ctrl)
                sc.append(trial.n_ctrl)
                et.append(trial.events_treat)
                st.append(trial.n_treat)
                meta_of.append(m)
                cell_of.append(trial_cell(trial, spec.characteristics).index)
            meta_start.append(len(ec))
            # the kernel always forms the full linear predictor, so the
            # covariate columns must be zero when the spec excludes them
            covariates.append(
                outcome_covariates(meta.outcome) if with_covariates else (0.0, 0.0)
            )

        return cls(
            spec=spec,
            meta_ids=tuple(meta.meta_id for meta in ds.metas),
            term_labels=tuple(t.label for t in terms),
            n_trials=len(ec),
            n_metas=len(ds.metas),
            n_terms=len(terms),
            n_cells=n_cells,
            n_beta=2 if with_covariates else 0,
            events_ctrl=np.asarray(ec, dtype=np.float64),
            size_ctrl=np.asarray(sc, dtype=np.float64),
            events_treat=np.asarray(et, dtype=np.float64),
            size_treat=np.asarray(st, dtype=np.float64),
            meta_of=np.asarray(meta_of, dtype=np.int32),
            cell_of=np.asarray(cell_of, dtype=np.int32),
            meta_start=np.asarray(meta_start, dtype=np.int32),
            cell_terms=cell_terms,
            covariates=np.asarray(covariates, dtype=np.float64),
        )
