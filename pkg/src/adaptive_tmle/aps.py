"""Adaptive prespecification: CV selection of outcome and propensity learners.

Stage 1 scores every outcome candidate by the cross-validated mean squared
influence curve with the known allocation probability and no targeting.
Stage 2 keeps the winning outcome learner fixed and scores every propensity
candidate on the targeted influence curve, with the fluctuation estimated on
the training folds and evaluated on the held-out fold. The unadjusted
learner is always among the candidates, so selection can never do worse
than no adjustment in CV risk.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from adaptive_tmle.data import UNIT_BOUNDS, TrialDataset, bound_outcome, make_folds
from adaptive_tmle.errors import AdaptiveTmleError, ConfigError
from adaptive_tmle.learners import LearnerSpec, fit_learner
from adaptive_tmle.tmle import (
    Estimand,
    TmleFit,
    clever_covariates,
    fluctuate,
    influence_curve,
    run_tmle,
    target_predictions,
)

_FOLD_TAG = 11
_LASSO_TAG = 1000


DEFAULT_V = 5


def default_folds(n: int, min_arm: int) -> int:
    """Five folds, reduced when an arm has fewer than five units."""
    return min(DEFAULT_V, min_arm)


def small_trial_candidates(p: int, role: str) -> tuple[LearnerSpec, ...]:
    """Unadjusted plus every single-covariate working regression."""
    specs = [LearnerSpec("unadjusted", role)]
    specs += [LearnerSpec("univariate_glm", role, covariate=j) for j in range(p)]
    return tuple(specs)


def large_trial_candidates(p: int, role: str) -> tuple[LearnerSpec, ...]:
    """The small-trial roster plus multivariable learners.

    Spline and treatment-interaction searches are outcome-only here; both
    can still be requested explicitly for the propensity role.
    """
    specs = list(small_trial_candidates(p, role))
    if p == 0:
        return tuple(specs)
    specs.append(LearnerSpec("main_terms_glm", role))
    specs.append(LearnerSpec("stepwise", role))
    if role == "outcome":
        specs.append(LearnerSpec("stepwise_interactions", role))
    specs.append(LearnerSpec("lasso", role))
    if role == "outcome":
        specs.append(LearnerSpec("mars", role))
    return tuple(specs)


PRESETS = {
    "small_trial": small_trial_candidates,
    "large_trial": large_trial_candidates,
}


@dataclass(frozen=True)
class ApsConfig:
    """Candidate rosters plus CV controls for one adaptive analysis."""

    outcome_candidates: tuple[LearnerSpec, ...]
    ps_candidates: tuple[LearnerSpec, ...]
    v: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.outcome_candidates or not self.ps_candidates:
            raise ConfigError("candidate lists must be non-empty")
        for spec in self.outcome_candidates:
            if spec.role != "outcome":
                raise ConfigError(f"{spec.label()} is not an outcome-role spec")
        for spec in self.ps_candidates:
            if spec.role != "propensity":
                raise ConfigError(f"{spec.label()} is not a propensity-role spec")
        if not any(s.kind == "unadjusted" for s in self.outcome_candidates):
            raise ConfigError("the unadjusted learner must be an outcome candidate")
        if not any(s.kind == "unadjusted" for s in self.ps_candidates):
            raise ConfigError("the unadjusted learner must be a propensity candidate")
        if self.v is not None and self.v < 2:
            raise ConfigError("v must be at least 2 (or omitted for the default)")


@dataclass
class CandidateRisk:
    label: str
    risk: float
    failed: bool = False
    reason: str = ""


@dataclass
class CvRiskLedger:
    """CV risks and choices from one adaptive fit, for reporting.

    selected_outcome and selected_ps index into the candidate lists; the
    matching labels are kept alongside so reports need no re-lookup.
    """

    v: int
    seed: int
    stage1: list[CandidateRisk]
    stage2: list[CandidateRisk]
    selected_outcome: int
    selected_ps: int
    selected_outcome_label: str
    selected_ps_label: str

    @property
    def failures(self) -> list[tuple[str, str]]:
        rows = self.stage1 + self.stage2
        return [(r.label, r.reason) for r in rows if r.failed]


def risk_from_fold_ics(fold_ics: list[np.ndarray]) -> float:
    """Average over folds of the within-fold mean squared influence curve."""
    return float(np.mean([float((d * d).mean()) for d in fold_ics]))


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence((seed, _LASSO_TAG + fold)).generate_state(1)[0])


def _subset(work: TrialDataset, mask: np.ndarray) -> TrialDataset:
    # keeps the known allocation probability, unlike subgroup()
    return replace(
        work,
        covariates=work.covariates[mask],
        treatment=work.treatment[mask],
        outcome=work.outcome[mask],
        strata=None if work.strata is None else work.strata[mask],
    )


class _FoldFits:
    """Per-fold training fits of one candidate plus the fold layout."""

    def __init__(self, spec: LearnerSpec, work: TrialDataset, fold_ids: np.ndarray, v: int, seed: int):
        self.spec = spec
        self.fits = []
        self.train_masks = []
        self.val_masks = []
        for fold in range(v):
            val = fold_ids == fold
            train = ~val
            fit = fit_learner(spec, _subset(work, train), seed=_fold_seed(seed, fold))
            pred = fit.predict(work.treatment, work.covariates)
            if not np.isfinite(pred).all():
                raise AdaptiveTmleError("non-finite predictions")
            self.fits.append(fit)
            self.train_masks.append(train)
            self.val_masks.append(val)


def _stage1_risk(fold_fits: _FoldFits, work: TrialDataset, estimand: Estimand, width: float) -> float:
    known_ps = work.allocation_prob
    fold_ics = []
    for fit, train, val in zip(fold_fits.fits, fold_fits.train_masks, fold_fits.val_masks):
        trt_v, covs_v, y_v = work.treatment[val], work.covariates[val], work.outcome[val]
        pred_t_v = fit.predict(trt_v, covs_v, set_treatment=1)
        pred_c_v = fit.predict(trt_v, covs_v, set_treatment=0)
        trt_t, covs_t = work.treatment[train], work.covariates[train]
        psi_t = float(fit.predict(trt_t, covs_t, set_treatment=1).mean())
        psi_c = float(fit.predict(trt_t, covs_t, set_treatment=0).mean())
        d = influence_curve(
            trt_v, y_v, pred_t_v, pred_c_v, np.full(val.sum(), known_ps),
            psi_t, psi_c, estimand, width,
        )
        fold_ics.append(d)
    return risk_from_fold_ics(fold_ics)


def _stage2_risk(
    outcome_fits: _FoldFits,
    ps_spec: LearnerSpec,
    work: TrialDataset,
    estimand: Estimand,
    width: float,
    seed: int,
) -> float:
    fold_ics = []
    for fold, (fit, train, val) in enumerate(
        zip(outcome_fits.fits, outcome_fits.train_masks, outcome_fits.val_masks)
    ):
        train_data = _subset(work, train)
        ps_fit = fit_learner(ps_spec, train_data, seed=_fold_seed(seed, fold))
        trt_t, covs_t, y_t = train_data.treatment, train_data.covariates, train_data.outcome
        ps_t = ps_fit.predict(trt_t, covs_t)
        pred_t_t = fit.predict(trt_t, covs_t, set_treatment=1)
        pred_c_t = fit.predict(trt_t, covs_t, set_treatment=0)
        pred_obs_t = np.where(trt_t == 1, pred_t_t, pred_c_t)
        h_t, h_c = clever_covariates(ps_t, trt_t)
        fluct = fluctuate(pred_obs_t, h_t, h_c, y_t)
        if not fluct.converged:
            raise AdaptiveTmleError("fluctuation did not converge")
        star_t_t, star_c_t = target_predictions(pred_t_t, pred_c_t, ps_t, fluct)
        psi_t = float(star_t_t.mean())
        psi_c = float(star_c_t.mean())

        trt_v, covs_v, y_v = work.treatment[val], work.covariates[val], work.outcome[val]
        ps_v = ps_fit.predict(trt_v, covs_v)
        pred_t_v = fit.predict(trt_v, covs_v, set_treatment=1)
        pred_c_v = fit.predict(trt_v, covs_v, set_treatment=0)
        star_t_v, star_c_v = target_predictions(pred_t_v, pred_c_v, ps_v, fluct)
        d = influence_curve(
            trt_v, y_v, star_t_v, star_c_v, ps_v, psi_t, psi_c, estimand, width,
        )
        fold_ics.append(d)
    return risk_from_fold_ics(fold_ics)


def _select(risks: list[CandidateRisk], candidates: tuple[LearnerSpec, ...]) -> int:
    finite = [i for i, r in enumerate(risks) if not r.failed and np.isfinite(r.risk)]
    if finite:
        best = min(finite, key=lambda i: (risks[i].risk, i))
        return best
    for i, spec in enumerate(candidates):
        if spec.kind == "unadjusted":
            return i
    raise AdaptiveTmleError("no candidate could be fit")  # unreachable: unadjusted is required


def _working_data(dataset: TrialDataset, estimand: Estimand) -> tuple[TrialDataset, float]:
    if dataset.outcome_type == "continuous":
        if estimand.scale == "ratio":
            raise ConfigError("ratio effects are not supported for continuous outcomes")
        work, bounds = bound_outcome(dataset)
    else:
        work, bounds = dataset, UNIT_BOUNDS
    return work, bounds.width


def _score_stage1(
    candidates: tuple[LearnerSpec, ...],
    work: TrialDataset,
    fold_ids: np.ndarray,
    v: int,
    seed: int,
    estimand: Estimand,
    width: float,
    names: tuple[str, ...],
) -> tuple[list[CandidateRisk], dict[int, _FoldFits]]:
    risks: list[CandidateRisk] = []
    cache: dict[int, _FoldFits] = {}
    for i, spec in enumerate(candidates):
        try:
            fits = _FoldFits(spec, work, fold_ids, v, seed)
            risk = _stage1_risk(fits, work, estimand, width)
            cache[i] = fits
            risks.append(CandidateRisk(spec.label(names), risk))
        except (AdaptiveTmleError, np.linalg.LinAlgError) as exc:
            risks.append(CandidateRisk(spec.label(names), float("inf"), failed=True, reason=str(exc)))
    return risks, cache


def cv_risk_stage1(
    dataset: TrialDataset,
    candidate: LearnerSpec,
    folds: np.ndarray,
    estimand: Estimand = Estimand(),
    seed: int = 0,
) -> float:
    """CV mean squared untargeted influence curve of one outcome candidate.

    Propensity is held at the known allocation probability. A fit failure
    in any fold yields an infinite risk rather than an exception.
    """
    work, width = _working_data(dataset, estimand)
    v = int(folds.max()) + 1
    risks, _ = _score_stage1(
        (candidate,), work, folds, v, seed, estimand, width, dataset.covariate_names
    )
    return risks[0].risk


def cv_risk_stage2(
    dataset: TrialDataset,
    selected_outcome: LearnerSpec,
    ps_candidate: LearnerSpec,
    folds: np.ndarray,
    estimand: Estimand = Estimand(),
    seed: int = 0,
) -> float:
    """CV mean squared targeted influence curve of one propensity candidate.

    The outcome learner is refit per training fold, the fluctuation is
    estimated on the training folds, and the influence curve is evaluated
    on the held-out fold. Infinite risk on any fit failure.
    """
    work, width = _working_data(dataset, estimand)
    v = int(folds.max()) + 1
    try:
        outcome_fits = _FoldFits(selected_outcome, work, folds, v, seed)
        return _stage2_risk(outcome_fits, ps_candidate, work, estimand, width, seed)
    except (AdaptiveTmleError, np.linalg.LinAlgError):
        return float("inf")


def select_outcome_learner(
    dataset: TrialDataset,
    config: ApsConfig,
    folds: np.ndarray | None = None,
    estimand: Estimand = Estimand(),
) -> tuple[int, list[CandidateRisk]]:
    """Stage-1 selection alone: index of the winner plus every scored risk."""
    work, width = _working_data(dataset, estimand)
    if folds is None:
        n1 = int(work.treatment.sum())
        v = config.v if config.v is not None else default_folds(work.n, min(n1, work.n - n1))
        folds = make_folds(work, v, np.random.SeedSequence((config.seed, _FOLD_TAG)))
    else:
        v = int(folds.max()) + 1
    risks, _ = _score_stage1(
        config.outcome_candidates, work, folds, v, config.seed,
        estimand, width, dataset.covariate_names,
    )
    return _select(risks, config.outcome_candidates), risks


def fit_aps_tmle(
    dataset: TrialDataset,
    config: ApsConfig,
    estimand: Estimand = Estimand(),
) -> tuple[TmleFit, CvRiskLedger]:
    """Run two-stage selection, then refit the chosen pair on the full data.

    The refit goes through run_tmle with the same seed, so rerunning the
    selected specs manually reproduces the returned estimate exactly.
    """
    work, width = _working_data(dataset, estimand)
    n1 = int(work.treatment.sum())
    v = config.v if config.v is not None else default_folds(work.n, min(n1, work.n - n1))
    fold_ids = make_folds(work, v, np.random.SeedSequence((config.seed, _FOLD_TAG)))

    names = dataset.covariate_names
    stage1, fold_fit_cache = _score_stage1(
        config.outcome_candidates, work, fold_ids, v, config.seed, estimand, width, names
    )
    chosen_outcome = _select(stage1, config.outcome_candidates)
    outcome_spec = config.outcome_candidates[chosen_outcome]

    stage2: list[CandidateRisk] = []
    outcome_fits = fold_fit_cache.get(chosen_outcome)
    if outcome_fits is None:  # selection fell back to an unadjusted spec that failed nowhere
        outcome_fits = _FoldFits(outcome_spec, work, fold_ids, v, config.seed)
    for spec in config.ps_candidates:
        try:
            risk = _stage2_risk(outcome_fits, spec, work, estimand, width, config.seed)
            stage2.append(CandidateRisk(spec.label(names), risk))
        except (AdaptiveTmleError, np.linalg.LinAlgError) as exc:
            stage2.append(CandidateRisk(spec.label(names), float("inf"), failed=True, reason=str(exc)))
    chosen_ps = _select(stage2, config.ps_candidates)
    ps_spec = config.ps_candidates[chosen_ps]

    fit = run_tmle(dataset, outcome_spec, ps_spec, estimand, seed=config.seed)
    ledger = CvRiskLedger(
        v=v,
        seed=config.seed,
        stage1=stage1,
        stage2=stage2,
        selected_outcome=chosen_outcome,
        selected_ps=chosen_ps,
        selected_outcome_label=outcome_spec.label(names),
        selected_ps_label=ps_spec.label(names),
    )
    return fit, ledger
