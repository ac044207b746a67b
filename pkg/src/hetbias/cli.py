"""Command-line interface.

Subcommands: ``simulate`` (synthetic data from known truth), ``fit`` (run the
sampler and write chain/summary artifacts), ``decompose`` (per-meta
heterogeneity decomposition from a fit directory), ``diagnose`` (convergence
report), ``report`` (publication-style tables and the scatter figure).

Exit codes: 0 success, 1 error, 2 convergence warning.  All artifacts are a
pure function of (inputs, config, seed); nothing depends on wall clock.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import reports
from .dataset import DataError, filter_eligible, parse_trials, serialize_dataset
from .decompose import figure1_data, per_meta_decomposition
from .mcmc import RHAT_THRESHOLD, McmcConfig, dic, run_analysis
from .mcmc.diagnostics import summarize_param
from .model import (
    BiasCell,
    Characteristic,
    ModelSpec,
    Tau2Covariates,
    Weighting,
    active_terms,
)
from .simulate import SimShape, SimTruth, generate_dataset

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_WARN = 2

OUT_ENV = "HETBIAS_OUT"

PRESETS: dict[str, tuple[tuple[Characteristic, ...], bool]] = {
    "A1": ((Characteristic.SG,), False),
    "A2": ((Characteristic.AC,), False),
    "A3": ((Characteristic.BL,), False),
    "B1": ((Characteristic.SG, Characteristic.AC), True),
    "B2": ((Characteristic.SG, Characteristic.BL), True),
    "B3": ((Characteristic.AC, Characteristic.BL), True),
    "B4": ((Characteristic.SG, Characteristic.AC, Characteristic.BL), True),
}

FAST_ITERS = 10_000
FAST_BURNIN = 1_000
DEFAULT_ITERS = 100_000
DEFAULT_BURNIN = 10_000


def preset_spec(name: str) -> ModelSpec:
    chars, interactions = PRESETS[name]
    return ModelSpec(characteristics=chars, include_interactions=interactions)


def _resolve_out(args, default: str | None = None) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or default
    if out is None:
        raise ValueError(f"no output directory: pass --out or set {OUT_ENV}")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_spec(args) -> ModelSpec:
    if getattr(args, "spec", None):
        spec = ModelSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
    elif getattr(args, "preset", None):
        spec = preset_spec(args.preset)
    else:
        raise ValueError("pass --preset or --spec")
    if getattr(args, "weighting", None):
        weighting = (
            Weighting.EMPIRICAL_JOINT
            if args.weighting == "joint"
            else Weighting.MARGINAL_INDEPENDENT
        )
        spec = replace(spec, cell_weighting=weighting)
    if getattr(args, "covariates", False):
        spec = replace(spec, tau2_covariates=Tau2Covariates.OUTCOME_TYPE)
    return spec


def _model_label(args, spec: ModelSpec) -> str:
    if getattr(args, "preset", None):
        return args.preset
    chars = "*".join(c.value for c in spec.characteristics)
    return f"custom-{chars}"


def _build_config(args) -> McmcConfig:
    fast = getattr(args, "fast", False)
    n_iter = args.iters if args.iters is not None else (FAST_ITERS if fast else DEFAULT_ITERS)
    n_burnin = (
        args.burnin if args.burnin is not None else (FAST_BURNIN if fast else DEFAULT_BURNIN)
    )
    return McmcConfig(
        n_iter=n_iter,
        n_burnin=n_burnin,
        n_chains=args.chains,
        thin=args.thin,
        seed=args.seed,
    )


def _write_chain_csv(path: Path, chain, thin: int) -> None:
    draws = chain.draws
    names = list(draws.keys())
    mat = np.column_stack([draws[n] for n in names])
    lines = ["iteration," + ",".join(names)]
    rows = mat.tolist()
    for j, row in enumerate(rows):
        lines.append(str((j + 1) * thin) + "," + ",".join(repr(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _summary_json(fit, dic_result) -> dict:
    def block(names: dict[str, str]) -> dict:
        out = {}
        for label, name in names.items():
            s = fit.summaries[name]
            entry = s.to_dict()
            entry["formatted"] = reports.format_interval(s.median, s.lower95, s.upper95)
            out[label] = entry
        return out

    terms = fit.term_labels
    out = {
        "lambda": block({t: f"lambda[{t}]" for t in terms}),
        "b0": block({t: f"b0[{t}]" for t in terms}),
        "phi2": block({t: f"phi2[{t}]" for t in terms}),
        "hyper": {
            "mu_tau": fit.summaries["mu_tau"].to_dict(),
            "sigma_tau": fit.summaries["sigma_tau"].to_dict(),
        },
        "per_meta": {
            "d": {m: fit.summaries[f"d[{m}]"].to_dict() for m in fit.meta_ids},
            "tau2": {m: fit.summaries[f"tau2[{m}]"].to_dict() for m in fit.meta_ids},
            "b": {
                t: {m: fit.summaries[f"b[{t}][{m}]"].to_dict() for m in fit.meta_ids}
                for t in terms
            },
        },
        "dic": dic_result.to_dict(),
        "acceptance": {
            f"chain_{c.chain_index}": c.acceptance for c in fit.chains
        },
        "convergence": {
            "threshold": RHAT_THRESHOLD,
            "flagged": list(fit.flagged),
            "r_hat_available": fit.r_hat_available,
            "monitored": list(fit.monitored),
        },
        "n_draws_per_chain": fit.chains[0].n_draws,
        "backend": fit.chains[0].backend,
    }
    if fit.chains[0].n_beta:
        out["hyper"]["beta[objective]"] = fit.summaries["beta[objective]"].to_dict()
        out["hyper"]["beta[subjective]"] = fit.summaries["beta[subjective]"].to_dict()
    return out


def cmd_fit(args) -> int:
    text = Path(args.input).read_text(encoding="utf-8")
    ds_full = parse_trials(text)
    spec = _build_spec(args)
    result = filter_eligible(ds_full, spec.characteristics)
    ds = result.dataset
    if not ds.metas:
        raise ValueError(
            "no meta-analysis is eligible for the requested characteristics"
        )
    cfg = _build_config(args)
    outdir = _resolve_out(args)

    fit = run_analysis(spec, ds, cfg, backend=args.backend)
    dic_result = dic(fit, ds, spec)

    (outdir / "data_used.csv").write_text(serialize_dataset(ds), encoding="utf-8")
    _write_json(
        outdir / "exclusions.json",
        [{"meta_id": mid, "reason": why} for mid, why in result.excluded],
    )
    _write_json(
        outdir / "config.json",
        {
            "command": "fit",
            "label": _model_label(args, spec),
            "input": str(args.input),
            "spec": spec.to_dict(),
            "mcmc": cfg.to_dict(),
            "meta_ids": list(fit.meta_ids),
            "term_labels": list(fit.term_labels),
            "backend": fit.chains[0].backend,
        },
    )
    for chain in fit.chains:
        _write_chain_csv(outdir / f"chain_{chain.chain_index}.csv", chain, cfg.thin)
    _write_json(outdir / "summary.json", _summary_json(fit, dic_result))

    print(f"fit complete: {len(ds.metas)} meta-analyses, {ds.n_trials} trials")
    print(f"DIC {dic_result.dic:.1f} (D_res {dic_result.d_res_bar:.1f}, p_D {dic_result.p_d:.1f})")
    print(f"artifacts in {outdir}")
    if fit.flagged:
        print(
            "convergence warning: r_hat > "
            f"{RHAT_THRESHOLD} for {', '.join(fit.flagged)}",
            file=sys.stderr,
        )
        return EXIT_WARN
    return EXIT_OK


@dataclass
class _LoadedDraws:
    """Pooled draw matrices reconstructed from chain CSV artifacts."""

    lam: np.ndarray
    d: np.ndarray
    tau2: np.ndarray
    b: np.ndarray
    lam_chains: list[np.ndarray]

    def pooled_matrix(self, attr: str) -> np.ndarray:
        return getattr(self, attr)


def _load_draws(fitdir: Path, config: dict) -> _LoadedDraws:
    meta_ids = config["meta_ids"]
    term_labels = config["term_labels"]
    chain_files = sorted(fitdir.glob("chain_*.csv"))
    if not chain_files:
        raise ValueError(f"no chain CSVs in {fitdir}")
    lam_list, d_list, tau2_list, b_list = [], [], [], []
    for path in chain_files:
        with open(path, "r", encoding="utf-8") as fh:
            names = fh.readline().strip().split(",")
        col = {name: idx for idx, name in enumerate(names)}
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        lam_list.append(
            np.column_stack([data[:, col[f"lambda[{t}]"]] for t in term_labels])
        )
        d_list.append(np.column_stack([data[:, col[f"d[{m}]"]] for m in meta_ids]))
        tau2_list.append(
            np.column_stack([data[:, col[f"tau2[{m}]"]] for m in meta_ids])
        )
        b = np.empty((data.shape[0], len(meta_ids), len(term_labels)))
        for ti, t in enumerate(term_labels):
            for mi, m in enumerate(meta_ids):
                b[:, mi, ti] = data[:, col[f"b[{t}][{m}]"]]
        b_list.append(b)
    return _LoadedDraws(
        lam=np.concatenate(lam_list),
        d=np.concatenate(d_list),
        tau2=np.concatenate(tau2_list),
        b=np.concatenate(b_list),
        lam_chains=lam_list,
    )


def _load_fit(fitdir: Path) -> tuple[dict, dict, ModelSpec]:
    config_path = fitdir / "config.json"
    summary_path = fitdir / "summary.json"
    if not config_path.exists() or not summary_path.exists():
        raise ValueError(f"{fitdir} is not a completed fit directory")
    config = json.loads(config_path.read_text(encoding="utf-8"))
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    return config, summary, ModelSpec.from_dict(config["spec"])


def _decompose_fit(fitdir: Path, weighting: str | None):
    config, summary, spec = _load_fit(fitdir)
    if weighting:
        spec = replace(
            spec,
            cell_weighting=(
                Weighting.EMPIRICAL_JOINT
                if weighting == "joint"
                else Weighting.MARGINAL_INDEPENDENT
            ),
        )
    ds = parse_trials((fitdir / "data_used.csv").read_text(encoding="utf-8"))
    draws = _load_draws(fitdir, config)
    decomp = per_meta_decomposition(draws, ds, spec)
    return config, summary, spec, ds, draws, decomp


def cmd_decompose(args) -> int:
    fitdir = Path(args.input)
    config, _, spec, _, _, decomp = _decompose_fit(fitdir, args.weighting)
    outdir = _resolve_out(args, default=str(fitdir))
    points, n_below = figure1_data(decomp)
    payload = decomp.to_dict()
    payload["label"] = config["label"]
    payload["n_tau2_below_total"] = n_below
    _write_json(outdir / "decomposition.json", payload)
    reports.write_csv(
        outdir / "decomposition.csv",
        [
            "meta_id",
            "tau2_median",
            "tau2_total_median",
            "proportion_explained",
            "proportion_unclamped_median",
        ],
        [
            [
                m.meta_id,
                repr(m.tau2_median),
                repr(m.tau2_total_median),
                repr(m.proportion_explained),
                repr(m.proportion_unclamped_median),
            ]
            for m in decomp.per_meta
        ],
    )
    print(
        "proportion explained: median %.3f (%.3f to %.3f); "
        "tau2 below total in %d of %d metas"
        % (
            decomp.summary_median,
            decomp.summary_lower95,
            decomp.summary_upper95,
            n_below,
            len(decomp.per_meta),
        )
    )
    return EXIT_OK


def cmd_diagnose(args) -> int:
    fitdir = Path(args.input)
    _, summary, _ = _load_fit(fitdir)
    conv = summary["convergence"]
    print(f"backend: {summary['backend']}; draws/chain: {summary['n_draws_per_chain']}")
    print("monitored parameters:")
    for section in ("lambda", "b0", "phi2"):
        for label, s in summary[section].items():
            r = s["r_hat"]
            print(
                f"  {section}[{label}]: median {s['median']:.3f} "
                f"({s['lower95']:.3f} to {s['upper95']:.3f}), "
                f"mc_error {s['mc_error']:.4f}, r_hat "
                + (f"{r:.4f}" if r is not None else "n/a")
            )
    for label, s in summary["hyper"].items():
        r = s["r_hat"]
        print(
            f"  {label}: median {s['median']:.3f} "
            f"({s['lower95']:.3f} to {s['upper95']:.3f}), "
            f"mc_error {s['mc_error']:.4f}, r_hat "
            + (f"{r:.4f}" if r is not None else "n/a")
        )
    print("acceptance rates:")
    for chain, rates in summary["acceptance"].items():
        cells = ", ".join(
            f"{k}={v:.3f}" for k, v in rates.items() if v is not None
        )
        print(f"  {chain}: {cells}")
    if conv["flagged"]:
        print(
            f"not converged: r_hat > {conv['threshold']} for "
            + ", ".join(conv["flagged"]),
            file=sys.stderr,
        )
        return EXIT_WARN
    print("converged: no monitored parameter above threshold")
    return EXIT_OK


def _cell_product_summaries(draws: _LoadedDraws, spec: ModelSpec) -> dict[str, dict]:
    """Posterior summaries of cell-level ratio products for multi-flag cells."""
    terms = spec.terms
    index_of = {t: i for i, t in enumerate(terms)}
    out: dict[str, dict] = {}
    for c in range(spec.n_cells):
        cell = BiasCell.from_index(c, spec.k)
        if sum(cell.flags) < 2:
            continue
        idx = [index_of[t] for t in active_terms(cell, spec)]
        label = "*".join(
            ch.value for ch, f in zip(spec.characteristics, cell.flags) if f
        )
        per_chain = [chain[:, idx].prod(axis=1) for chain in draws.lam_chains]
        pooled = np.concatenate(per_chain)
        out[label] = summarize_param(pooled, per_chain).to_dict()
    return out


def cmd_report(args) -> int:
    fitdirs = [Path(p) for p in args.input]
    outdir = _resolve_out(args)
    table3: list[list] = []
    table4: list[list] = []
    fig_rows: list[list] = []
    dic_entries: list[tuple[str, dict]] = []
    first_svg_written = False
    for fitdir in fitdirs:
        config, summary, spec, ds, draws, decomp = _decompose_fit(
            fitdir, args.weighting
        )
        label = config["label"]
        cell_products = (
            _cell_product_summaries(draws, spec) if spec.k >= 2 else None
        )
        for row in reports.table3_rows(summary, cell_products):
            table3.append([label] + row)
        table4.append(
            reports.table4_row(
                label,
                len(decomp.per_meta),
                {
                    "median": decomp.summary_median,
                    "lower95": decomp.summary_lower95,
                    "upper95": decomp.summary_upper95,
                },
            )
        )
        points, n_below = figure1_data(decomp)
        for meta_id, tau2, total in points:
            fig_rows.append([label, meta_id, repr(tau2), repr(total)])
        svg = reports.render_figure1_svg(points, title=label)
        if not first_svg_written:
            (outdir / "figure1.svg").write_text(svg, encoding="utf-8")
            first_svg_written = True
        if len(fitdirs) > 1:
            (outdir / f"figure1_{label}.svg").write_text(svg, encoding="utf-8")
        dic_entries.append((label, summary["dic"]))

    reports.write_csv(
        outdir / "table3.csv",
        ["model", "parameter", "term", "median", "lower95", "upper95", "formatted"],
        table3,
    )
    reports.write_csv(
        outdir / "table4.csv",
        ["model", "n_metas", "median", "lower95", "upper95", "formatted"],
        table4,
    )
    reports.write_csv(
        outdir / "figure1.csv",
        ["model", "meta_id", "tau2_median", "tau2_total_median"],
        fig_rows,
    )
    if len(fitdirs) > 1:
        reports.write_csv(
            outdir / "tableS1.csv",
            ["model", "D_res", "p_D", "DIC"],
            reports.tableS1_rows(dic_entries),
        )
    print(f"report written to {outdir}")
    return EXIT_OK


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected min,median,max got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def cmd_simulate(args) -> int:
    spec = _build_spec(args)
    outdir = _resolve_out(args)
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        truth_raw = raw.get("truth", {})
        shape_raw = raw.get("shape", {})
        terms = {t.label: t for t in spec.terms}

        def term_map(d: dict, fallback: float) -> dict:
            return {
                terms[k]: float(v)
                for k, v in d.items()
            } if d else {t: fallback for t in spec.terms}

        truth = SimTruth(
            lambdas=term_map(truth_raw.get("lambdas"), 1.0),
            b0s=term_map(truth_raw.get("b0s"), 0.0),
            phis=term_map(truth_raw.get("phis"), 0.1),
            **{
                k: truth_raw[k]
                for k in (
                    "mu_tau",
                    "sigma_tau",
                    "baseline_logodds_mean",
                    "baseline_logodds_sd",
                    "d_mean",
                    "d_sd",
                )
                if k in truth_raw
            },
        )
        shape_kwargs = dict(shape_raw)
        if "prob_high_or_unclear" in shape_kwargs:
            shape_kwargs["prob_high_or_unclear"] = {
                Characteristic(k): float(v)
                for k, v in shape_kwargs["prob_high_or_unclear"].items()
            }
        for key in ("trials_per_meta", "n_per_arm", "outcome_mix"):
            if key in shape_kwargs:
                shape_kwargs[key] = tuple(shape_kwargs[key])
        shape = SimShape(**shape_kwargs)
    else:
        truth = SimTruth.constant(
            spec,
            lam=args.lam,
            b0=args.b0,
            phi=args.phi,
            mu_tau=args.mu_tau,
            sigma_tau=args.sigma_tau,
        )
        shape_kwargs = {"n_metas": args.metas}
        if args.trials:
            shape_kwargs["trials_per_meta"] = _parse_triple(args.trials)
        if args.arms:
            shape_kwargs["n_per_arm"] = _parse_triple(args.arms)
        if args.prob_flag is not None:
            shape_kwargs["prob_high_or_unclear"] = {
                c: args.prob_flag for c in Characteristic
            }
        shape = SimShape(**shape_kwargs)

    ds, record = generate_dataset(truth, shape, spec, seed=args.seed)
    (outdir / "data.csv").write_text(serialize_dataset(ds), encoding="utf-8")
    _write_json(outdir / "truth.json", record)
    print(f"simulated {len(ds.metas)} meta-analyses / {ds.n_trials} trials in {outdir}")
    return EXIT_OK


def _add_common_fit_args(p) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="model preset")
    p.add_argument("--spec", help="model spec JSON path")
    p.add_argument("--weighting", choices=["marginal", "joint"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetbias",
        description=(
            "Hierarchical bias/heterogeneity models for collections of "
            "meta-analyses with risk-of-bias judgments"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model and write chain/summary artifacts")
    p_fit.add_argument("--input", required=True, help="trial CSV path")
    _add_common_fit_args(p_fit)
    p_fit.add_argument("--iters", type=int, default=None)
    p_fit.add_argument("--burnin", type=int, default=None)
    p_fit.add_argument("--chains", type=int, default=2)
    p_fit.add_argument("--thin", type=int, default=1)
    p_fit.add_argument("--fast", action="store_true", help="1k burn-in + 10k iterations")
    p_fit.add_argument("--covariates", action="store_true", help="outcome-type covariates on tau2")
    p_fit.add_argument("--backend", choices=["cython", "python"], default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_dec = sub.add_parser("decompose", help="decompose heterogeneity from a fit directory")
    p_dec.add_argument("--input", required=True, help="fit directory")
    p_dec.add_argument("--weighting", choices=["marginal", "joint"], default=None)
    p_dec.add_argument("--out", default=None)
    p_dec.set_defaults(func=cmd_decompose)

    p_diag = sub.add_parser("diagnose", help="convergence report for a fit directory")
    p_diag.add_argument("--input", required=True, help="fit directory")
    p_diag.set_defaults(func=cmd_diagnose)

    p_rep = sub.add_parser("report", help="tables and figures from fit directories")
    p_rep.add_argument("--input", required=True, nargs="+", help="fit directories")
    p_rep.add_argument("--weighting", choices=["marginal", "joint"], default=None)
    p_rep.add_argument("--out", default=None)
    p_rep.set_defaults(func=cmd_report)

    p_sim = sub.add_parser("simulate", help="generate synthetic trial data")
    _add_common_fit_args(p_sim)
    p_sim.set_defaults(preset="A1")
    p_sim.add_argument("--config", help="JSON with truth/shape overrides")
    p_sim.add_argument("--metas", type=int, default=20)
    p_sim.add_argument("--trials", help="min,median,max trials per meta")
    p_sim.add_argument("--arms", help="min,median,max participants per arm")
    p_sim.add_argument("--prob-flag", type=float, default=None, dest="prob_flag")
    p_sim.add_argument("--lam", type=float, default=1.0)
    p_sim.add_argument("--b0", type=float, default=0.0)
    p_sim.add_argument("--phi", type=float, default=0.1)
    p_sim.add_argument("--mu-tau", type=float, default=math.log(0.04), dest="mu_tau")
    p_sim.add_argument("--sigma-tau", type=float, default=0.4, dest="sigma_tau")
    p_sim.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
