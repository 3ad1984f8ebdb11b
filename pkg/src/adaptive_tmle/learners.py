"""Candidate learners for outcome regression and propensity estimation.

Every learner is deterministic given (data, spec, seed) and exposes
predict(treatment, covariates, set_treatment=None) returning clipped
probabilities on the unit scale: outcome predictions are truncated to
[1e-4, 1 - 1e-4], propensity predictions to [0.01, 0.99].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit

from adaptive_tmle import glm
from adaptive_tmle.data import TrialDataset
from adaptive_tmle.errors import ConfigError

OUTCOME_CLIP = (1e-4, 1.0 - 1e-4)
PS_CLIP = (0.01, 0.99)

KINDS = (
    "unadjusted",
    "univariate_glm",
    "main_terms_glm",
    "stepwise",
    "stepwise_interactions",
    "lasso",
    "mars",
    "screened_mars",
)


@dataclass(frozen=True)
class LearnerSpec:
    """Identifies one candidate learner for a given role.

    covariate is the column index used by univariate_glm and must be None
    for every other kind.
    """

    kind: str
    role: str
    covariate: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}")
        if self.role not in ("outcome", "propensity"):
            raise ConfigError(f"unknown learner role {self.role!r}")
        if self.kind == "univariate_glm":
            if self.covariate is None or self.covariate < 0:
                raise ConfigError("univariate_glm needs a covariate index")
        elif self.covariate is not None:
            raise ConfigError(f"{self.kind} does not take a covariate index")

    def label(self, names: tuple[str, ...] | None = None) -> str:
        if self.kind == "univariate_glm":
            # an out-of-range index must still label cleanly so the failure
            # can be recorded instead of crashing the report
            if names and self.covariate < len(names):
                name = names[self.covariate]
            else:
                name = f"x{self.covariate}"
            return f"univariate_glm({name})"
        return self.kind


def _clip_for(role: str) -> tuple[float, float]:
    return OUTCOME_CLIP if role == "outcome" else PS_CLIP


class ArmMeanFit:
    """Unadjusted outcome learner: each arm's mean outcome, closed form."""

    def __init__(self, spec: LearnerSpec, mean_treated: float, mean_control: float):
        self.spec = spec
        self.converged = True
        self.mean_treated = mean_treated
        self.mean_control = mean_control

    def predict(self, treatment, covariates, set_treatment=None):
        n = treatment.shape[0]
        lo, hi = OUTCOME_CLIP
        if set_treatment is None:
            out = np.where(treatment == 1, self.mean_treated, self.mean_control)
        else:
            out = np.full(n, self.mean_treated if set_treatment == 1 else self.mean_control)
        return np.clip(out, lo, hi)


class ConstantPsFit:
    """Unadjusted propensity learner: the design allocation probability."""

    def __init__(self, spec: LearnerSpec, prob: float):
        self.spec = spec
        self.converged = True
        self.prob = prob

    def predict(self, treatment, covariates, set_treatment=None):
        lo, hi = PS_CLIP
        return np.clip(np.full(treatment.shape[0], self.prob), lo, hi)


class GlmFit:
    """Logistic regression on an explicit term list (shared by GLM-family learners)."""

    def __init__(self, spec: LearnerSpec, terms: list[tuple], result: glm.GlmResult):
        self.spec = spec
        self.terms = terms
        self.coef = result.coef
        self.converged = result.converged
        self.iterations = result.iterations

    def predict(self, treatment, covariates, set_treatment=None):
        trt = treatment if set_treatment is None else np.full(treatment.shape[0], set_treatment)
        eta = glm.build_design(self.terms, trt, covariates) @ self.coef
        lo, hi = _clip_for(self.spec.role)
        return np.clip(expit(eta), lo, hi)


def _role_target(spec: LearnerSpec, dataset: TrialDataset) -> np.ndarray:
    if spec.role == "outcome":
        return dataset.outcome
    return dataset.treatment.astype(float)


def _base_terms(role: str) -> list[tuple]:
    return [glm.CONST, glm.TRT] if role == "outcome" else [glm.CONST]


def _scope_terms(role: str, p: int, interactions: bool) -> list[tuple]:
    terms: list[tuple] = [glm.cov(j) for j in range(p)]
    if interactions:
        if role == "outcome":
            terms += [glm.trt_cov(j) for j in range(p)]
        terms += [glm.cov_cov(j, k) for j in range(p) for k in range(j + 1, p)]
    return terms


def _aic(result: glm.GlmResult) -> float:
    return -2.0 * result.loglik + 2.0 * int(result.kept.sum())


def _stepwise(spec: LearnerSpec, dataset: TrialDataset, interactions: bool) -> GlmFit:
    """Bidirectional AIC search over main effects (optionally interactions).

    Adds are scanned in scope order and drops in model order; the first
    candidate achieving the best strict AIC improvement wins, so the search
    is deterministic and cannot cycle.
    """
    y = _role_target(spec, dataset)
    base = _base_terms(spec.role)
    scope = _scope_terms(spec.role, dataset.n_covariates, interactions)
    all_terms = base + scope
    all_cols = glm.build_design(all_terms, dataset.treatment, dataset.covariates)
    n_base = len(base)

    current = list(range(n_base))
    fit = glm.fit_glm(all_cols[:, current], y, "logit")
    current_aic = _aic(fit)
    max_steps = 2 * len(scope) + 10
    for _ in range(max_steps):
        best_aic = current_aic - 1e-10
        best_move = None
        in_model = set(current)
        for t in range(n_base, len(all_terms)):
            if t in in_model:
                continue
            cand = current + [t]
            beta0 = np.append(fit.coef, 0.0)
            res = glm.fit_glm(all_cols[:, cand], y, "logit", beta0=beta0)
            a = _aic(res)
            if a < best_aic:
                best_aic, best_move = a, (cand, res)
        for pos in range(n_base, len(current)):
            cand = current[:pos] + current[pos + 1 :]
            beta0 = np.delete(fit.coef, pos)
            res = glm.fit_glm(all_cols[:, cand], y, "logit", beta0=beta0)
            a = _aic(res)
            if a < best_aic:
                best_aic, best_move = a, (cand, res)
        if best_move is None:
            break
        current, fit = best_move
        current_aic = best_aic
    terms = [all_terms[i] for i in current]
    return GlmFit(spec, terms, fit)


def screen_correlation(
    covariates: np.ndarray, target: np.ndarray, alpha: float = 0.10
) -> tuple[int, ...]:
    """Indices of covariates whose Pearson correlation with target has p < alpha.

    Constant columns are excluded. If nothing passes, the single smallest
    p-value is kept so downstream learners always see one predictor.
    """
    n, p = covariates.shape
    pvals = np.full(p, np.inf)
    ty = target - target.mean()
    sy = float(ty @ ty)
    for j in range(p):
        tx = covariates[:, j] - covariates[:, j].mean()
        sx = float(tx @ tx)
        if sx <= 0.0 or sy <= 0.0 or n < 3:
            continue
        r = float(tx @ ty) / np.sqrt(sx * sy)
        r = min(1.0, max(-1.0, r))
        if abs(r) >= 1.0:
            pvals[j] = 0.0
            continue
        t = r * np.sqrt((n - 2) / (1.0 - r * r))
        pvals[j] = 2.0 * stats.t.sf(abs(t), df=n - 2)
    kept = np.flatnonzero(pvals < alpha)
    if kept.size == 0:
        if not np.isfinite(pvals).any():
            return ()
        kept = np.array([int(np.argmin(pvals))])
    return tuple(int(j) for j in kept)


def fit_learner(spec: LearnerSpec, dataset: TrialDataset, seed: int = 0):
    """Fit one candidate learner. The seed only drives internal CV (lasso)."""
    if spec.kind == "univariate_glm" and spec.covariate >= dataset.n_covariates:
        raise ConfigError(
            f"univariate_glm covariate {spec.covariate} out of range for p={dataset.n_covariates}"
        )
    if spec.kind == "unadjusted":
        if spec.role == "outcome":
            treated = dataset.treatment == 1
            return ArmMeanFit(
                spec,
                float(dataset.outcome[treated].mean()),
                float(dataset.outcome[~treated].mean()),
            )
        return ConstantPsFit(spec, dataset.allocation_prob)

    if spec.kind in ("univariate_glm", "main_terms_glm"):
        terms = _base_terms(spec.role)
        if spec.kind == "univariate_glm":
            terms = terms + [glm.cov(spec.covariate)]
        else:
            terms = terms + [glm.cov(j) for j in range(dataset.n_covariates)]
        y = _role_target(spec, dataset)
        design = glm.build_design(terms, dataset.treatment, dataset.covariates)
        return GlmFit(spec, terms, glm.fit_glm(design, y, "logit"))

    if spec.kind in ("stepwise", "stepwise_interactions"):
        return _stepwise(spec, dataset, interactions=spec.kind == "stepwise_interactions")

    if spec.kind == "lasso":
        from adaptive_tmle.lasso import fit_lasso

        return fit_lasso(spec, dataset, seed)

    if spec.kind in ("mars", "screened_mars"):
        from adaptive_tmle.mars import fit_mars

        screened = None
        if spec.kind == "screened_mars":
            screened = screen_correlation(dataset.covariates, _role_target(spec, dataset))
        return fit_mars(spec, dataset, screened=screened)

    raise ConfigError(f"unknown learner kind {spec.kind!r}")
