"""Command-line front end: analyze, simulate, and permute.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
numeric failure. All report files are deterministic for a fixed config,
including under any worker count.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import asdict, replace

from scipy.stats import binomtest

from adaptive_tmle.config import RunConfig, parse_config, resolve_scale
from adaptive_tmle.data import CsvSchema, load_csv, subgroup, subgroup_mask
from adaptive_tmle.errors import AdaptiveTmleError, ConfigError, DataError, NumericError
from adaptive_tmle.reports import jsonable, write_reports
from adaptive_tmle.simlab import (
    DgpSpec,
    EstimatorDef,
    run_estimator,
    run_replicates,
    selection_shares,
    summarize_metrics,
    treatment_blind_typeI,
)
from adaptive_tmle.tmle import Estimand

ANALYZE_COLUMNS = [
    "subgroup", "estimator", "n", "scale", "target",
    "effect", "se", "ci_lower", "ci_upper", "p_value",
    "variance", "rel_var", "outcome_learner", "ps_learner",
]
SIMULATE_METRICS_COLUMNS = [
    "outcome", "scenario", "n", "design", "scale", "target", "estimator",
    "n_reps", "n_failed", "coverage", "rejection_rate", "rejection_type",
    "bias", "variance", "mse", "rel_eff", "savings", "mean_truth",
]
SIMULATE_REPLICATE_COLUMNS = [
    "outcome", "scenario", "n", "design", "replicate", "estimator",
    "truth", "effect", "se", "ci_lower", "ci_upper", "p_value",
    "reject", "covered", "outcome_learner", "ps_learner", "failed", "reason",
]
PERMUTE_COLUMNS = [
    "estimator", "b", "n_reject", "n_failed",
    "rejection_rate", "rate_ci_lower", "rate_ci_upper",
]

_SIM_COVARIATES = ("w1", "w2", "w3", "w4", "w5")


def expand_roster(config: RunConfig, covariate_names: tuple[str, ...]) -> tuple[EstimatorDef, ...]:
    """Turn preset tokens into concrete estimator definitions.

    The static comparator adjusts for one named covariate in the outcome
    regression (default: the first covariate). With no covariates at all,
    static degrades to the unadjusted fit and the adaptive presets collapse
    to unadjusted-only candidate lists.
    """
    defs = []
    for token in config.estimators:
        if token == "unadjusted":
            defs.append(EstimatorDef("unadjusted", "unadjusted"))
        elif token == "static":
            index = None
            if config.static_covariate is not None:
                if config.static_covariate not in covariate_names:
                    raise ConfigError(
                        f"static_covariate {config.static_covariate!r} is not a dataset covariate"
                    )
                index = covariate_names.index(config.static_covariate)
            elif covariate_names:
                index = 0
            defs.append(EstimatorDef("static", "static", outcome_covariate=index))
        elif token == "small-aps":
            defs.append(EstimatorDef("small-aps", "aps", preset="small_trial"))
        else:
            defs.append(EstimatorDef("large-aps", "aps", preset="large_trial"))
    return tuple(defs)


def _csv_header(path: str) -> list[str]:
    try:
        with open(path, newline="") as handle:
            header = next(csv.reader(handle), None)
    except OSError as exc:
        raise DataError(f"cannot read data file {path}: {exc}") from None
    if not header:
        raise DataError(f"{path} is empty")
    return [h.strip() for h in header]


def load_config_dataset(config: RunConfig):
    """Ingest the configured CSV; covariates default to all unclaimed columns."""
    covariates = config.covariate_cols
    if covariates is None:
        claimed = {config.treatment_col, config.outcome_col, config.strata_col}
        covariates = tuple(c for c in _csv_header(config.data) if c not in claimed)
    schema = CsvSchema(
        treatment=config.treatment_col,
        outcome=config.outcome_col,
        covariates=covariates,
        strata=config.strata_col,
        outcome_type=config.outcome_type,
    )
    try:
        dataset = load_csv(config.data, schema)
    except OSError as exc:
        raise DataError(f"cannot read data file {config.data}: {exc}") from None
    if config.allocation is not None:
        dataset = replace(dataset, allocation_prob=config.allocation)
    return dataset


def _ledger_payload(ledger) -> dict:
    return {
        "v": ledger.v,
        "seed": ledger.seed,
        "stage1": [asdict(r) for r in ledger.stage1],
        "stage2": [asdict(r) for r in ledger.stage2],
        "selected_outcome": ledger.selected_outcome,
        "selected_ps": ledger.selected_ps,
        "selected_outcome_label": ledger.selected_outcome_label,
        "selected_ps_label": ledger.selected_ps_label,
    }


def cmd_analyze(config: RunConfig) -> dict[str, str]:
    dataset = load_config_dataset(config)
    estimand = Estimand(resolve_scale(config.scale, dataset.outcome_type), config.target)
    roster = expand_roster(config, dataset.covariate_names)
    groups = [("(all)", dataset)]
    for expr in config.subgroups:
        groups.append((expr, subgroup(dataset, subgroup_mask(dataset, expr))))
    rows = []
    ledgers: dict[str, dict] = {}
    for group_name, group_data in groups:
        fits = {}
        for est in roster:
            fit, ledger = run_estimator(est, group_data, estimand, config.v, config.seed)
            fits[est.name] = fit
            if ledger is not None:
                ledgers.setdefault(group_name, {})[est.name] = _ledger_payload(ledger)
        ref_var = fits["unadjusted"].variance if "unadjusted" in fits else None
        for est in roster:
            fit = fits[est.name]
            rows.append({
                "subgroup": group_name,
                "estimator": est.name,
                "n": group_data.n,
                "scale": estimand.scale,
                "target": estimand.target,
                "effect": fit.effect,
                "se": fit.se,
                "ci_lower": fit.ci[0],
                "ci_upper": fit.ci[1],
                "p_value": fit.p_value,
                "variance": fit.variance,
                "rel_var": fit.variance / ref_var if ref_var else None,
                "outcome_learner": fit.outcome_spec.label(group_data.covariate_names),
                "ps_learner": fit.ps_spec.label(group_data.covariate_names),
            })
    return write_reports(
        config.outdir, ANALYZE_COLUMNS, rows, ANALYZE_COLUMNS, rows,
        ledgers, jsonable(asdict(config)),
    )


def cmd_simulate(config: RunConfig) -> dict[str, str]:
    roster = expand_roster(config, _SIM_COVARIATES)
    metrics_rows = []
    replicate_rows = []
    ledgers: dict[str, dict] = {}
    for outcome_kind in config.outcome_kind:
        for scenario in config.scenario:
            for n in config.n:
                for design in config.design:
                    spec = DgpSpec(outcome_kind, scenario, n, design, null_effect=config.null_effect)
                    estimand = Estimand(resolve_scale(config.scale, outcome_kind), config.target)
                    results = run_replicates(
                        spec, roster, estimand, config.replicates, config.seed,
                        v=config.v, workers=config.workers,
                    )
                    cell = {
                        "outcome": outcome_kind, "scenario": scenario,
                        "n": n, "design": design,
                        "scale": estimand.scale, "target": estimand.target,
                    }
                    rejection_type = "type1" if config.null_effect else "power"
                    for m in summarize_metrics(results, null_value=estimand.null_value):
                        metrics_rows.append({
                            **cell,
                            "estimator": m.estimator,
                            "n_reps": m.n_reps,
                            "n_failed": m.n_failed,
                            "coverage": m.coverage,
                            "rejection_rate": m.power,
                            "rejection_type": rejection_type,
                            "bias": m.bias,
                            "variance": m.variance,
                            "mse": m.mse,
                            "rel_eff": m.rel_eff,
                            "savings": m.savings,
                            "mean_truth": m.mean_truth,
                        })
                    for res in results:
                        for rec in res.records:
                            replicate_rows.append({
                                "outcome": outcome_kind, "scenario": scenario,
                                "n": n, "design": design,
                                "replicate": res.index,
                                "estimator": rec.estimator,
                                "truth": res.truth,
                                "effect": rec.effect,
                                "se": rec.se,
                                "ci_lower": rec.ci_lower,
                                "ci_upper": rec.ci_upper,
                                "p_value": rec.p_value,
                                "reject": rec.reject,
                                "covered": rec.covered,
                                "outcome_learner": rec.selected_outcome,
                                "ps_learner": rec.selected_ps,
                                "failed": rec.failed,
                                "reason": rec.reason,
                            })
                    cell_key = f"{outcome_kind}/{scenario}/{n}/{design}"
                    for est in roster:
                        if est.kind != "aps":
                            continue
                        outcome_sh, ps_sh = selection_shares(results, est.name)
                        ledgers.setdefault(cell_key, {})[est.name] = {
                            "outcome_shares": outcome_sh,
                            "ps_shares": ps_sh,
                        }
    return write_reports(
        config.outdir, SIMULATE_METRICS_COLUMNS, metrics_rows,
        SIMULATE_REPLICATE_COLUMNS, replicate_rows,
        ledgers, jsonable(asdict(config)),
    )


def cmd_permute(config: RunConfig) -> dict[str, str]:
    dataset = load_config_dataset(config)
    estimand = Estimand(resolve_scale(config.scale, dataset.outcome_type), config.target)
    roster = expand_roster(config, dataset.covariate_names)
    audit = treatment_blind_typeI(
        dataset, roster, estimand, config.b, config.seed,
        v=config.v, workers=config.workers,
    )
    rows = []
    for row in audit:
        interval = binomtest(row.n_reject, row.b).proportion_ci(0.95, method="exact")
        rows.append({
            "estimator": row.estimator,
            "b": row.b,
            "n_reject": row.n_reject,
            "n_failed": row.n_failed,
            "rejection_rate": row.rejection_rate,
            "rate_ci_lower": float(interval.low),
            "rate_ci_upper": float(interval.high),
        })
    return write_reports(
        config.outdir, PERMUTE_COLUMNS, rows, PERMUTE_COLUMNS, rows,
        {}, jsonable(asdict(config)),
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aps",
        description="TMLE with cross-validated selection of the adjustment strategy",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--seed", help="base seed (overrides file and APS_SEED)")
        p.add_argument("--workers", help="parallel worker count")
        p.add_argument("--v", help="cross-validation fold count")
        p.add_argument("--outdir", help="report output directory")

    p_analyze = sub.add_parser("analyze", help="estimate effects on a trial CSV")
    common(p_analyze)
    p_analyze.add_argument("--subgroup", action="append", help="subgroup expression; repeatable")

    p_simulate = sub.add_parser("simulate", help="run replicate studies over a DGP grid")
    common(p_simulate)
    p_simulate.add_argument("--replicates", help="replicates per grid cell")

    p_permute = sub.add_parser("permute", help="treatment-blind Type-I audit")
    common(p_permute)
    p_permute.add_argument("--b", help="number of treatment permutations")

    return parser


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    mapping = {
        "seed": args.seed,
        "workers": args.workers,
        "v": args.v,
        "outdir": args.outdir,
        "command": args.command,
    }
    if getattr(args, "subgroup", None):
        mapping["subgroup"] = ";".join(args.subgroup)
    if getattr(args, "replicates", None):
        mapping["replicates"] = args.replicates
    if getattr(args, "b", None):
        mapping["b"] = args.b
    return mapping


_DISPATCH = {"analyze": cmd_analyze, "simulate": cmd_simulate, "permute": cmd_permute}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config, _overrides(args))
        paths = _DISPATCH[config.command](config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, AdaptiveTmleError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    for name in sorted(paths):
        print(paths[name])
    return 0


if __name__ == "__main__":
    sys.exit(main())
