"""Trial-level data ingestion, eligibility and descriptive summaries.

Input files are flat comma-delimited tables, one row per randomized trial,
with two-arm binary counts, three risk-of-bias judgments and an outcome
category.  Events are coded so that the outcome is harmful.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import CHARACTERISTIC_ORDER, BiasCell, Characteristic

__all__ = [
    "RoBJudgment",
    "RiskClass",
    "OutcomeType",
    "TrialRecord",
    "MetaAnalysis",
    "Dataset",
    "DataError",
    "parse_trials",
    "serialize_dataset",
    "dichotomize_judgment",
    "filter_eligible",
    "FilterResult",
    "describe",
    "DescriptiveSummary",
    "empirical_proportions",
    "ProportionEstimate",
    "trial_cell",
]

HEADER = (
    "meta_id,trial_id,events_treat,n_treat,events_ctrl,n_ctrl,"
    "rob_sg,rob_ac,rob_bl,outcome"
)


class DataError(ValueError):
    """Malformed input data; message carries the offending line numbers."""


class RoBJudgment(Enum):
    LOW = "low"
    HIGH = "high"
    UNCLEAR = "unclear"


class RiskClass(Enum):
    LOW_RISK = "low_risk"
    HIGH_OR_UNCLEAR = "high_or_unclear"


class OutcomeType(Enum):
    MORTALITY = "mortality"
    OBJECTIVE_OTHER = "objective"
    SUBJECTIVE = "subjective"


def dichotomize_judgment(j: RoBJudgment) -> RiskClass:
    """Collapse the three-level judgment: high and unclear pool together."""
    if j is RoBJudgment.LOW:
        return RiskClass.LOW_RISK
    return RiskClass.HIGH_OR_UNCLEAR


@dataclass(frozen=True)
class TrialRecord:
    meta_id: str
    trial_id: str
    events_treat: int
    n_treat: int
    events_ctrl: int
    n_ctrl: int
    rob_sg: RoBJudgment
    rob_ac: RoBJudgment
    rob_bl: RoBJudgment
    outcome: OutcomeType

    def __post_init__(self):
        if self.n_treat < 1 or self.n_ctrl < 1:
            raise ValueError(f"trial {self.trial_id}: arm sizes must be >= 1")
        if not 0 <= self.events_treat <= self.n_treat:
            raise ValueError(
                f"trial {self.trial_id}: events_treat {self.events_treat} "
                f"outside [0, {self.n_treat}]"
            )
        if not 0 <= self.events_ctrl <= self.n_ctrl:
            raise ValueError(
                f"trial {self.trial_id}: events_ctrl {self.events_ctrl} "
                f"outside [0, {self.n_ctrl}]"
            )

    def judgment(self, char: Characteristic) -> RoBJudgment:
        if char is Characteristic.SG:
            return self.rob_sg
        if char is Characteristic.AC:
            return self.rob_ac
        return self.rob_bl

    def risk_class(self, char: Characteristic) -> RiskClass:
        return dichotomize_judgment(self.judgment(char))

    @property
    def n_participants(self) -> int:
        return self.n_treat + self.n_ctrl


def trial_cell(trial: TrialRecord, chars: Sequence[Characteristic]) -> BiasCell:
    """The trial's bias cell over the given (ordered) characteristics."""
    return BiasCell(
        tuple(trial.risk_class(c) is RiskClass.HIGH_OR_UNCLEAR for c in chars)
    )


@dataclass(frozen=True)
class MetaAnalysis:
    meta_id: str
    trials: tuple[TrialRecord, ...]
    outcome: OutcomeType

    def __post_init__(self):
        if not self.trials:
            raise ValueError(f"meta-analysis {self.meta_id} has no trials")
        ids = [t.trial_id for t in self.trials]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate trial_ids in meta-analysis {self.meta_id}")
        for t in self.trials:
            if t.meta_id != self.meta_id:
                raise ValueError(
                    f"trial {t.trial_id} carries meta_id {t.meta_id}, "
                    f"expected {self.meta_id}"
                )
            if t.outcome is not self.outcome:
                raise ValueError(
                    f"trial {t.trial_id} outcome {t.outcome.value} differs "
                    f"from meta-analysis outcome {self.outcome.value}"
                )

    @property
    def n_trials(self) -> int:
        return len(self.trials)


@dataclass(frozen=True)
class Dataset:
    metas: tuple[MetaAnalysis, ...]

    def __post_init__(self):
        ids = [m.meta_id for m in self.metas]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate meta_ids in dataset")

    @property
    def n_trials(self) -> int:
        return sum(m.n_trials for m in self.metas)

    def trials(self) -> Iterable[TrialRecord]:
        for meta in self.metas:
            yield from meta.trials


_JUDGMENT_TOKENS = {j.value: j for j in RoBJudgment}
_OUTCOME_TOKENS = {o.value: o for o in OutcomeType}


def _parse_count(token: str, column: str, line: int, errors: list[str]) -> int | None:
    try:
        value = int(token)
    except ValueError:
        errors.append(f"line {line}: {column} {token!r} is not an integer")
        return None
    if value < 0:
        errors.append(f"line {line}: {column} must be non-negative, got {value}")
        return None
    return value


def parse_trials(text: str) -> Dataset:
    """Parse delimited trial data into a Dataset grouped by meta_id.

    Row order is preserved within each meta-analysis; meta-analyses appear
    in order of first occurrence.  All malformed rows are collected and
    reported together in a single DataError.
    """
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        raise DataError("empty input: missing header row")
    header = ",".join(s.strip() for s in rows[0])
    if header != HEADER:
        raise DataError(f"bad header: expected {HEADER!r}, got {header!r}")

    errors: list[str] = []
    seen: set[tuple[str, str]] = set()
    groups: dict[str, list[TrialRecord]] = {}
    for offset, row in enumerate(rows[1:], start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != 10:
            errors.append(f"line {offset}: expected 10 fields, got {len(row)}")
            continue
        fields = [f.strip() for f in row]
        meta_id, trial_id = fields[0], fields[1]
        ev_t = _parse_count(fields[2], "events_treat", offset, errors)
        n_t = _parse_count(fields[3], "n_treat", offset, errors)
        ev_c = _parse_count(fields[4], "events_ctrl", offset, errors)
        n_c = _parse_count(fields[5], "n_ctrl", offset, errors)
        judgments = []
        for col, token in zip(("rob_sg", "rob_ac", "rob_bl"), fields[6:9]):
            j = _JUDGMENT_TOKENS.get(token.lower())
            if j is None:
                errors.append(f"line {offset}: unknown {col} judgment {token!r}")
            judgments.append(j)
        outcome = _OUTCOME_TOKENS.get(fields[9].lower())
        if outcome is None:
            errors.append(f"line {offset}: unknown outcome {fields[9]!r}")
        if None in (ev_t, n_t, ev_c, n_c, outcome) or None in judgments:
            continue
        if ev_t > n_t:
            errors.append(
                f"line {offset}: events_treat {ev_t} exceeds n_treat {n_t}"
            )
            continue
        if ev_c > n_c:
            errors.append(f"line {offset}: events_ctrl {ev_c} exceeds n_ctrl {n_c}")
            continue
        if n_t < 1 or n_c < 1:
            errors.append(f"line {offset}: arm sizes must be >= 1")
            continue
        key = (meta_id, trial_id)
        if key in seen:
            errors.append(f"line {offset}: duplicate (meta_id, trial_id) {key}")
            continue
        seen.add(key)
        groups.setdefault(meta_id, []).append(
            TrialRecord(
                meta_id=meta_id,
                trial_id=trial_id,
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

    for meta_id, trials in groups.items():
        outcomes = {t.outcome for t in trials}
        if len(outcomes) > 1:
            errors.append(
                f"meta-analysis {meta_id}: trials disagree on outcome type "
                f"({sorted(o.value for o in outcomes)})"
            )

    if errors:
        raise DataError("; ".join(errors))

    metas = tuple(
        MetaAnalysis(meta_id=mid, trials=tuple(ts), outcome=ts[0].outcome)
        for mid, ts in groups.items()
    )
    return Dataset(metas=metas)


def serialize_dataset(ds: Dataset) -> str:
    """Inverse of parse_trials: emit the canonical CSV schema."""
    lines = [HEADER]
    for t in ds.trials():
        lines.append(
            f"{t.meta_id},{t.trial_id},{t.events_treat},{t.n_treat},"
            f"{t.events_ctrl},{t.n_ctrl},{t.rob_sg.value},{t.rob_ac.value},"
            f"{t.rob_bl.value},{t.outcome.value}"
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FilterResult:
    dataset: Dataset
    excluded: tuple[tuple[str, str], ...]  # (meta_id, reason)


def filter_eligible(
    ds: Dataset, chars: Iterable[Characteristic]
) -> FilterResult:
    """Keep metas with both risk classes present for every given characteristic.

    A meta-analysis can only inform the contrast for a characteristic if it
    contains at least one low-risk and one high/unclear-risk trial for it.
    """
    chars = tuple(chars)
    if not chars:
        raise ValueError("at least one characteristic required")
    kept = []
    excluded = []
    for meta in ds.metas:
        reason = None
        for c in chars:
            classes = {t.risk_class(c) for t in meta.trials}
            if RiskClass.LOW_RISK not in classes:
                reason = f"no low-risk trial for {c.value}"
                break
            if RiskClass.HIGH_OR_UNCLEAR not in classes:
                reason = f"no high/unclear-risk trial for {c.value}"
                break
        if reason is None:
            kept.append(meta)
        else:
            excluded.append((meta.meta_id, reason))
    return FilterResult(dataset=Dataset(metas=tuple(kept)), excluded=tuple(excluded))


@dataclass(frozen=True)
class SummaryStats:
    minimum: float
    median: float
    maximum: float
    iqr: tuple[float, float]

    @classmethod
    def of(cls, values: Sequence[float]) -> "SummaryStats":
        arr = np.asarray(values, dtype=float)
        q25, q50, q75 = np.percentile(arr, [25.0, 50.0, 75.0])
        return cls(
            minimum=float(arr.min()),
            median=float(q50),
            maximum=float(arr.max()),
            iqr=(float(q25), float(q75)),
        )

    def to_dict(self) -> dict:
        return {
            "min": self.minimum,
            "median": self.median,
            "max": self.maximum,
            "iqr": list(self.iqr),
        }


@dataclass(frozen=True)
class DescriptiveSummary:
    """Counts over the 8 dichotomized SGxACxBL cells plus size summaries."""

    n_metas: int
    n_trials: int
    combination_counts: Mapping[tuple[RiskClass, RiskClass, RiskClass], int]
    judgment_counts: Mapping[str, Mapping[str, int]]
    judgment_counts_by_outcome: Mapping[str, Mapping[str, Mapping[str, int]]]
    trials_per_meta: SummaryStats | None
    participants_per_trial: SummaryStats | None

    def to_dict(self) -> dict:
        combo = {
            "|".join(rc.value for rc in key): count
            for key, count in self.combination_counts.items()
        }
        return {
            "n_metas": self.n_metas,
            "n_trials": self.n_trials,
            "combination_counts": combo,
            "judgment_counts": {k: dict(v) for k, v in self.judgment_counts.items()},
            "judgment_counts_by_outcome": {
                o: {k: dict(v) for k, v in per.items()}
                for o, per in self.judgment_counts_by_outcome.items()
            },
            "trials_per_meta": (
                self.trials_per_meta.to_dict() if self.trials_per_meta else None
            ),
            "participants_per_trial": (
                self.participants_per_trial.to_dict()
                if self.participants_per_trial
                else None
            ),
        }


def describe(ds: Dataset) -> DescriptiveSummary:
    """Descriptive summary of risk-class combinations and size distributions."""
    combos = {
        key: 0
        for key in product(
            (RiskClass.LOW_RISK, RiskClass.HIGH_OR_UNCLEAR), repeat=3
        )
    }
    jcounts = {
        c.value: {j.value: 0 for j in RoBJudgment} for c in CHARACTERISTIC_ORDER
    }
    jcounts_outcome = {
        o.value: {
            c.value: {j.value: 0 for j in RoBJudgment} for c in CHARACTERISTIC_ORDER
        }
        for o in OutcomeType
    }
    for t in ds.trials():
        key = tuple(t.risk_class(c) for c in CHARACTERISTIC_ORDER)
        combos[key] += 1
        for c in CHARACTERISTIC_ORDER:
            j = t.judgment(c)
            jcounts[c.value][j.value] += 1
            jcounts_outcome[t.outcome.value][c.value][j.value] += 1
    n_trials = ds.n_trials
    return DescriptiveSummary(
        n_metas=len(ds.metas),
        n_trials=n_trials,
        combination_counts=combos,
        judgment_counts=jcounts,
        judgment_counts_by_outcome=jcounts_outcome,
        trials_per_meta=(
            SummaryStats.of([m.n_trials for m in ds.metas]) if ds.metas else None
        ),
        participants_per_trial=(
            SummaryStats.of([t.n_participants for t in ds.trials()])
            if n_trials
            else None
        ),
    )


@dataclass(frozen=True)
class ProportionEstimate:
    """Flag proportions of one meta-analysis over ordered characteristics.

    ``marginals[j]`` is the share of trials flagged on characteristic j;
    ``joint[c]`` the share in bias cell c (bitmask indexing, bit j set when
    characteristic j is flagged).
    """

    chars: tuple[Characteristic, ...]
    marginals: tuple[float, ...]
    joint: tuple[float, ...]

    def __post_init__(self):
        if len(self.joint) != 1 << len(self.chars):
            raise ValueError("joint weights must cover all 2^K cells")
        if any(not 0.0 <= p <= 1.0 for p in self.marginals):
            raise ValueError("marginal proportions must lie in [0, 1]")
        if abs(sum(self.joint) - 1.0) > 1e-9:
            raise ValueError("joint cell frequencies must sum to 1")


def empirical_proportions(
    meta: MetaAnalysis, chars: Sequence[Characteristic]
) -> ProportionEstimate:
    """Marginal and joint flagged-trial frequencies for one meta-analysis."""
    chars = tuple(chars)
    if not meta.trials:
        raise ValueError("meta-analysis has no trials")
    n = meta.n_trials
    k = len(chars)
    marg = [0] * k
    joint = [0] * (1 << k)
    for t in meta.trials:
        idx = 0
        for j, c in enumerate(chars):
            if t.risk_class(c) is RiskClass.HIGH_OR_UNCLEAR:
                marg[j] += 1
                idx |= 1 << j
        joint[idx] += 1
    return ProportionEstimate(
        chars=chars,
        marginals=tuple(m / n for m in marg),
        joint=tuple(j / n for j in joint),
    )
