"""Simulation laboratory: data-generating processes, replicate runs, metrics.

Each replicate draws covariates and both counterfactual outcomes, assigns
treatment by the trial design, runs every configured estimator, and scores
it against that draw's sample effect. Replicates are seeded independently
via SeedSequence((base_seed, index)), so results do not depend on worker
count and reruns are byte-identical.
"""

from __future__ import annotations

import logging
import multiprocessing
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from adaptive_tmle.aps import ApsConfig, CvRiskLedger, PRESETS, fit_aps_tmle
from adaptive_tmle.data import TrialDataset
from adaptive_tmle.errors import AdaptiveTmleError, ConfigError
from adaptive_tmle.learners import LearnerSpec
from adaptive_tmle.tmle import Estimand, TmleFit, run_tmle

OUTCOME_KINDS = ("binary", "continuous")
SCENARIOS = ("linear", "interactive", "polynomial", "treatment_only")
DESIGNS = ("simple", "stratified")

_PERMUTE_TAG = 7919

_log = logging.getLogger("adaptive_tmle.simlab")


class SkipReplicate(AdaptiveTmleError):
    """The drawn sample cannot support the requested estimand; drop the draw."""


@dataclass(frozen=True)
class DgpSpec:
    """One simulated trial setting.

    null_effect evaluates both counterfactuals at a=0, turning any scenario
    into an exact null while keeping its outcome distribution.
    """

    outcome_kind: str
    scenario: str
    n: int
    design: str = "simple"
    null_effect: bool = False

    def __post_init__(self) -> None:
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ConfigError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown design {self.design!r}")
        if self.n < 10:
            raise ConfigError("n must be at least 10")


def gen_covariates(spec: DgpSpec, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (W, U1, U2). Draw order is fixed for reproducibility.

    seed may be anything np.random.default_rng accepts, including an
    existing Generator, which is used in place.
    """
    rng = np.random.default_rng(seed)
    n = spec.n
    if spec.outcome_kind == "binary":
        w = rng.standard_normal((n, 5))
        u1 = rng.uniform(0.0, 1.0, n)
        u2 = rng.uniform(0.0, 1.0, n)
        return w, u1, u2
    w1 = rng.binomial(1, 0.5, n).astype(float)
    w2 = rng.binomial(1, 0.2 * w1).astype(float)
    w3 = rng.uniform(0.0, 5.0, n)
    w4 = expit(-2.0 + w1 + w2 + rng.uniform(0.0, 2.0, n))
    w5 = 1.0 + rng.binomial(3, 0.3, n)
    u1 = rng.uniform(0.0, 0.5, n)
    u2 = rng.uniform(0.0, 1.0, n)
    return np.column_stack([w1, w2, w3, w4, w5]), u1, u2


def _binary_index(scenario: str, a: float, w: np.ndarray, u2: np.ndarray) -> np.ndarray:
    w1, w2, w3, w4, w5 = (w[:, j] for j in range(5))
    if scenario == "linear":
        return a + w1 - w2 + w3 - w4 + w5 - 2.0 * a * w1 + u2
    if scenario == "interactive":
        return a + w1 + w2 + w3 + w4 + w5 + a * w1 + a * w2 * w4 + a * w3 + a * w5 * u2 + u2
    if scenario == "polynomial":
        return a + w1 + w2 + w3 + w4 + w5 - w1 * w3 + 2.0 * w1 * w3 * w4 - w4 * (1.0 - w1) + u2
    return 0.1 * a + 2.0 * u2


def _continuous_mean(scenario: str, a: float, w: np.ndarray, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    w1, w2, w3, w4, w5 = (w[:, j] for j in range(5))
    if scenario == "linear":
        return (90.0 + 0.07 * a + 0.7 * w1 + 0.3 * w2 + 0.1 * w3 + 0.3 * w4 + 0.4 * w5
                + 0.25 * a * w1 + 5.0 * u1 + u2)
    if scenario == "interactive":
        return (150.0 + 0.05 * a + 0.33 * w1 - 0.25 * w2 + 0.5 * w3 - 0.2 * w4 + 0.05 * w5
                + 0.01 * a * w1 + 0.02 * a * w3 + 0.3 * a * u1 + 5.8 * u1 + u2)
    if scenario == "polynomial":
        return (90.0 + 0.17 * a + 0.33 * (w1 + w2 + w3 + w4 + w5) - 0.2 * w1 * w3
                + 0.5 * w1 * (0.8 - 0.6 * w4) * w3 + 0.25 * (1.0 - w1) * (-0.2 + 0.15 * w4)
                + 4.7 * u1 + u2)
    return 90.0 + 0.1 * a + 3.0 * u1 + u2


def gen_counterfactuals(spec: DgpSpec, w, u1, u2) -> tuple[np.ndarray, np.ndarray]:
    """Potential outcomes under treatment and control for each unit."""
    arms = (0.0, 0.0) if spec.null_effect else (1.0, 0.0)
    if spec.outcome_kind == "binary":
        y1 = (u1 < expit(_binary_index(spec.scenario, arms[0], w, u2))).astype(float)
        y0 = (u1 < expit(_binary_index(spec.scenario, arms[1], w, u2))).astype(float)
        return y1, y0
    y1 = _continuous_mean(spec.scenario, arms[0], w, u1, u2)
    y0 = _continuous_mean(spec.scenario, arms[1], w, u1, u2)
    return y1, y0


def assign_treatment(spec: DgpSpec, w: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray | None]:
    """1:1 assignment, either simple Bernoulli or balanced within W1 strata."""
    rng = np.random.default_rng(seed)
    n = spec.n
    if spec.design == "simple":
        return rng.binomial(1, 0.5, n), None
    strata = (w[:, 0] > 0).astype(int)
    a = np.zeros(n, dtype=int)
    for label in np.unique(strata):
        idx = np.flatnonzero(strata == label)
        m = idx.size
        block = np.concatenate([np.ones(m // 2, dtype=int), np.zeros(m // 2, dtype=int)])
        if m % 2:
            block = np.append(block, rng.integers(0, 2))
        a[idx] = rng.permutation(block)
    return a, strata


def true_sample_effect(y1: np.ndarray, y0: np.ndarray, estimand: Estimand) -> float:
    """Sample effect of this draw on the requested scale."""
    if estimand.scale == "difference":
        return float(y1.mean() - y0.mean())
    if y0.mean() <= 0.0:
        raise SkipReplicate("sample ratio undefined: control mean is zero")
    return float(y1.mean() / y0.mean())


def draw_trial(spec: DgpSpec, rng: np.random.Generator) -> tuple[TrialDataset, np.ndarray, np.ndarray]:
    """One simulated dataset plus both counterfactual vectors."""
    w, u1, u2 = gen_covariates(spec, rng)
    y1, y0 = gen_counterfactuals(spec, w, u1, u2)
    a, strata = assign_treatment(spec, w, rng)
    y = np.where(a == 1, y1, y0)
    dataset = TrialDataset(
        covariates=w,
        treatment=a,
        outcome=y,
        allocation_prob=0.5,
        outcome_type=spec.outcome_kind,
        covariate_names=("w1", "w2", "w3", "w4", "w5"),
        strata=strata,
    )
    return dataset, y1, y0


@dataclass(frozen=True)
class EstimatorDef:
    """One estimator in the simulation roster.

    kind "unadjusted": arm means with known allocation.
    kind "static": fixed univariate working regressions (outcome and/or
    propensity covariate index; None means unadjusted for that role).
    kind "aps": adaptive selection from a preset or explicit candidates.
    """

    name: str
    kind: str
    outcome_covariate: int | None = None
    ps_covariate: int | None = None
    preset: str | None = None
    outcome_candidates: tuple[LearnerSpec, ...] | None = None
    ps_candidates: tuple[LearnerSpec, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("unadjusted", "static", "aps"):
            raise ConfigError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "aps":
            explicit = self.outcome_candidates is not None and self.ps_candidates is not None
            if self.preset is None and not explicit:
                raise ConfigError(f"estimator {self.name}: aps needs a preset or candidate lists")
            if self.preset is not None and self.preset not in PRESETS:
                raise ConfigError(f"unknown preset {self.preset!r}")


def _aps_config(est: EstimatorDef, p: int, v: int | None, seed: int) -> ApsConfig:
    if est.preset is not None:
        builder = PRESETS[est.preset]
        return ApsConfig(builder(p, "outcome"), builder(p, "propensity"), v=v, seed=seed)
    return ApsConfig(est.outcome_candidates, est.ps_candidates, v=v, seed=seed)


def run_estimator(
    est: EstimatorDef,
    dataset: TrialDataset,
    estimand: Estimand,
    v: int | None,
    seed: int,
) -> tuple[TmleFit, CvRiskLedger | None]:
    """Fit one roster entry on one dataset."""
    unadj_o = LearnerSpec("unadjusted", "outcome")
    unadj_p = LearnerSpec("unadjusted", "propensity")
    if est.kind == "unadjusted":
        return run_tmle(dataset, unadj_o, unadj_p, estimand, seed=seed), None
    if est.kind == "static":
        o_spec = unadj_o
        p_spec = unadj_p
        if est.outcome_covariate is not None:
            o_spec = LearnerSpec("univariate_glm", "outcome", covariate=est.outcome_covariate)
        if est.ps_covariate is not None:
            p_spec = LearnerSpec("univariate_glm", "propensity", covariate=est.ps_covariate)
        return run_tmle(dataset, o_spec, p_spec, estimand, seed=seed), None
    config = _aps_config(est, dataset.n_covariates, v, seed)
    return fit_aps_tmle(dataset, config, estimand)


@dataclass
class EstimateRecord:
    estimator: str
    effect: float
    se: float
    ci_lower: float
    ci_upper: float
    variance: float
    p_value: float
    reject: bool
    covered: bool
    selected_outcome: str
    selected_ps: str
    converged: bool
    failed: bool = False
    reason: str = ""


@dataclass
class ReplicateResult:
    index: int
    truth: float
    records: list[EstimateRecord]


def _estimator_seed(rep_seq: np.random.SeedSequence) -> int:
    return int(rep_seq.spawn(2)[1].generate_state(1)[0])


def _run_replicate(args) -> ReplicateResult | None:
    spec, estimators, estimand, v, base_seed, index = args
    rep_seq = np.random.SeedSequence((base_seed, index))
    data_seq, est_seq = rep_seq.spawn(2)
    rng = np.random.default_rng(data_seq)
    dataset, y1, y0 = draw_trial(spec, rng)
    try:
        truth = true_sample_effect(y1, y0, estimand)
    except SkipReplicate as exc:
        _log.warning("replicate %d skipped: %s", index, exc)
        return None
    seed = int(est_seq.generate_state(1)[0])
    records = []
    for est in estimators:
        try:
            fit, ledger = run_estimator(est, dataset, estimand, v, seed)
            covered = bool(fit.ci[0] <= truth <= fit.ci[1])
            records.append(
                EstimateRecord(
                    estimator=est.name,
                    effect=fit.effect,
                    se=fit.se,
                    ci_lower=fit.ci[0],
                    ci_upper=fit.ci[1],
                    variance=fit.variance,
                    p_value=fit.p_value,
                    reject=fit.reject,
                    covered=covered,
                    selected_outcome=ledger.selected_outcome_label if ledger else fit.outcome_spec.label(dataset.covariate_names),
                    selected_ps=ledger.selected_ps_label if ledger else fit.ps_spec.label(dataset.covariate_names),
                    converged=fit.converged,
                )
            )
        except AdaptiveTmleError as exc:
            records.append(
                EstimateRecord(
                    estimator=est.name,
                    effect=float("nan"), se=float("nan"),
                    ci_lower=float("nan"), ci_upper=float("nan"),
                    variance=float("nan"), p_value=float("nan"),
                    reject=False, covered=False,
                    selected_outcome="", selected_ps="",
                    converged=False, failed=True, reason=str(exc),
                )
            )
    return ReplicateResult(index=index, truth=truth, records=records)


def run_replicates(
    spec: DgpSpec,
    estimators: tuple[EstimatorDef, ...],
    estimand: Estimand,
    replicates: int,
    base_seed: int,
    v: int | None = None,
    workers: int = 1,
) -> list[ReplicateResult]:
    """Run the roster over independent draws; order and values are worker-count invariant."""
    tasks = [(spec, estimators, estimand, v, base_seed, i) for i in range(replicates)]
    if workers <= 1:
        results = [_run_replicate(t) for t in tasks]
    else:
        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_run_replicate, tasks, chunksize=max(1, replicates // (workers * 8)))
    return [r for r in results if r is not None]


@dataclass
class MetricsRow:
    estimator: str
    n_reps: int
    n_failed: int
    coverage: float
    power: float
    bias: float
    variance: float
    mse: float
    rel_eff: float
    savings: float
    mean_truth: float


def summarize_metrics(
    results: list[ReplicateResult],
    null_value: float | None = None,
    reference: str = "unadjusted",
) -> list[MetricsRow]:
    """Per-estimator operating characteristics against per-draw sample truths.

    power is the fraction of replicates whose test rejects null_value
    (CI excludes it); when null_value is omitted the stored rejection
    flags, computed against the estimand's own null, are used, which is
    the same test. rel_eff is each estimator's MSE over the reference
    estimator's MSE; savings is 1 - rel_eff. Failed replicates are
    excluded per estimator and counted.
    """
    if not results:
        return []
    names = [rec.estimator for rec in results[0].records]
    by_name: dict[str, dict[str, list]] = {
        name: {"effect": [], "truth": [], "covered": [], "reject": [], "failed": 0}
        for name in names
    }
    for res in results:
        for rec in res.records:
            slot = by_name[rec.estimator]
            if rec.failed:
                slot["failed"] += 1
                continue
            if null_value is None:
                reject = rec.reject
            else:
                reject = not (rec.ci_lower <= null_value <= rec.ci_upper)
            slot["effect"].append(rec.effect)
            slot["truth"].append(res.truth)
            slot["covered"].append(rec.covered)
            slot["reject"].append(reject)
    mses = {}
    rows = []
    for name in names:
        slot = by_name[name]
        eff = np.asarray(slot["effect"])
        tru = np.asarray(slot["truth"])
        if eff.size == 0:
            rows.append(MetricsRow(name, 0, slot["failed"], *(float("nan"),) * 7, float("nan")))
            continue
        err = eff - tru
        mse = float((err ** 2).mean())
        mses[name] = mse
        rows.append(
            MetricsRow(
                estimator=name,
                n_reps=int(eff.size),
                n_failed=slot["failed"],
                coverage=float(np.mean(slot["covered"])),
                power=float(np.mean(slot["reject"])),
                bias=float(err.mean()),
                variance=float(eff.var(ddof=1)) if eff.size > 1 else 0.0,
                mse=mse,
                rel_eff=float("nan"),
                savings=float("nan"),
                mean_truth=float(tru.mean()),
            )
        )
    ref_mse = mses.get(reference)
    if ref_mse and ref_mse > 0.0:
        for row in rows:
            if row.estimator in mses:
                row.rel_eff = mses[row.estimator] / ref_mse
                row.savings = 1.0 - row.rel_eff
    return rows


def selection_shares(results: list[ReplicateResult], estimator: str) -> tuple[dict, dict]:
    """Fraction of replicates each learner was selected on, by role."""
    outcome: dict[str, float] = {}
    ps: dict[str, float] = {}
    total = 0
    for res in results:
        for rec in res.records:
            if rec.estimator != estimator or rec.failed:
                continue
            total += 1
            outcome[rec.selected_outcome] = outcome.get(rec.selected_outcome, 0) + 1
            ps[rec.selected_ps] = ps.get(rec.selected_ps, 0) + 1
    if total == 0:
        return {}, {}
    return (
        {k: v / total for k, v in sorted(outcome.items())},
        {k: v / total for k, v in sorted(ps.items())},
    )


def permute_treatment(dataset: TrialDataset, rng: np.random.Generator) -> TrialDataset:
    """Shuffle arm labels (within strata when present); rows stay untouched."""
    a = dataset.treatment.copy()
    if dataset.strata is None:
        a = rng.permutation(a)
    else:
        for label in np.unique(dataset.strata):
            idx = np.flatnonzero(dataset.strata == label)
            a[idx] = rng.permutation(a[idx])
    return replace(dataset, treatment=a)


@dataclass
class AuditRow:
    estimator: str
    b: int
    n_reject: int
    n_failed: int
    rejection_rate: float


def treatment_blind_typeI(
    dataset: TrialDataset,
    estimators: tuple[EstimatorDef, ...],
    estimand: Estimand,
    b: int,
    base_seed: int,
    v: int | None = None,
    workers: int = 1,
) -> list[AuditRow]:
    """Type-I error audit: rerun each estimator on B treatment permutations.

    Permuting labels breaks any treatment-outcome link, so each estimator's
    rejection rate should sit near the nominal 5% level. A failed fit
    counts as a non-rejection (with a logged warning), keeping the rate's
    denominator at B.
    """
    if b < 100:
        raise ConfigError("the audit needs at least 100 permutations")
    tasks = [(dataset, estimators, estimand, v, base_seed, i) for i in range(b)]
    if workers <= 1:
        outcomes = [_run_permutation(t) for t in tasks]
    else:
        with multiprocessing.Pool(workers) as pool:
            outcomes = pool.map(_run_permutation, tasks, chunksize=max(1, b // (workers * 8)))
    rows = []
    for j, est in enumerate(estimators):
        flags = [o[j] for o in outcomes]
        n_reject = sum(1 for f in flags if f == 1)
        n_failed = sum(1 for f in flags if f == -1)
        if n_failed:
            _log.warning(
                "%s failed on %d of %d permutations; counted as non-rejections",
                est.name, n_failed, b,
            )
        rows.append(
            AuditRow(
                estimator=est.name,
                b=b,
                n_reject=n_reject,
                n_failed=n_failed,
                rejection_rate=n_reject / b,
            )
        )
    return rows


def _run_permutation(args) -> list[int]:
    dataset, estimators, estimand, v, base_seed, index = args
    seq = np.random.SeedSequence((base_seed, _PERMUTE_TAG, index))
    perm_seq, est_seq = seq.spawn(2)
    permuted = permute_treatment(dataset, np.random.default_rng(perm_seq))
    seed = int(est_seq.generate_state(1)[0])
    flags = []
    for est in estimators:
        try:
            fit, _ = run_estimator(est, permuted, estimand, v, seed)
            flags.append(1 if fit.reject else 0)
        except AdaptiveTmleError:
            flags.append(-1)
    return flags
