"""Targeted maximum-likelihood estimation of two-arm treatment effects.

Estimation runs on the unit scale (continuous outcomes are rescaled first)
with a logistic fluctuation. Difference estimates and influence curves are
mapped back to the natural scale by the outcome range; ratio estimates use
the log scale for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from adaptive_tmle import glm
from adaptive_tmle.data import UNIT_BOUNDS, OutcomeBounds, TrialDataset, bound_outcome
from adaptive_tmle.errors import ConfigError, NumericError
from adaptive_tmle.learners import LearnerSpec, fit_learner

SCALES = ("difference", "ratio")
TARGETS = ("sample", "population", "conditional")


@dataclass(frozen=True)
class Estimand:
    """Effect scale plus inferential target.

    sample and conditional targets share the residual-only influence curve;
    population adds the deviation of predictions around their mean.
    """

    scale: str = "difference"
    target: str = "sample"

    def __post_init__(self) -> None:
        if self.scale not in SCALES:
            raise ConfigError(f"unknown effect scale {self.scale!r}")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown inferential target {self.target!r}")

    @property
    def null_value(self) -> float:
        return 1.0 if self.scale == "ratio" else 0.0


def clever_covariates(ps: np.ndarray, treatment: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-probability covariates for the treated and control arms."""
    treated = treatment == 1
    h_treated = np.where(treated, 1.0 / ps, 0.0)
    h_control = np.where(treated, 0.0, 1.0 / (1.0 - ps))
    return h_treated, h_control


@dataclass
class Fluctuation:
    eps_treated: float
    eps_control: float
    converged: bool
    iterations: int


def fluctuate(
    initial_obs: np.ndarray,
    h_treated: np.ndarray,
    h_control: np.ndarray,
    y: np.ndarray,
) -> Fluctuation:
    """Solve the targeting step: logistic fit of y on the clever covariates.

    The fit has no intercept and uses logit(initial predictions) as offset.
    Starting from zero and checking the score first means an initial fit
    that already solves the score returns eps exactly (0, 0).
    """
    design = np.column_stack([h_treated, h_control])
    offset = logit(initial_obs)
    res = glm.fit_glm(design, y, "logit", offset=offset)
    return Fluctuation(float(res.coef[0]), float(res.coef[1]), res.converged, res.iterations)


def target_predictions(
    initial_treated: np.ndarray,
    initial_control: np.ndarray,
    ps: np.ndarray,
    fluct: Fluctuation,
) -> tuple[np.ndarray, np.ndarray]:
    """Shift both counterfactual predictions along the fluctuation submodel."""
    targeted_treated = expit(logit(initial_treated) + fluct.eps_treated / ps)
    targeted_control = expit(logit(initial_control) + fluct.eps_control / (1.0 - ps))
    return targeted_treated, targeted_control


def estimate_effect(
    psi_treated: float, psi_control: float, scale: str, bounds: OutcomeBounds
) -> float:
    """Contrast of unit-scale arm means on the requested natural scale."""
    if scale == "difference":
        return bounds.width * (psi_treated - psi_control)
    if bounds != UNIT_BOUNDS:
        raise NumericError("ratio effects are only defined for binary outcomes")
    if psi_control <= 0.0:
        raise NumericError("ratio undefined: control mean is zero")
    return psi_treated / psi_control


def influence_curve(
    treatment: np.ndarray,
    y: np.ndarray,
    pred_treated: np.ndarray,
    pred_control: np.ndarray,
    ps: np.ndarray,
    psi_treated: float,
    psi_control: float,
    estimand: Estimand,
    width: float = 1.0,
) -> np.ndarray:
    """Per-unit influence curve on the inference scale.

    Inputs are unit-scale predictions and arm means; ps is whatever
    propensity was used (known allocation before targeting, estimated
    after). Ratio estimands return the log-scale curve.
    """
    treated = treatment == 1
    resid = y - np.where(treated, pred_treated, pred_control)
    d_treated = np.where(treated, resid / ps, 0.0)
    d_control = np.where(treated, 0.0, resid / (1.0 - ps))
    if estimand.target == "population":
        d_treated = d_treated + (pred_treated - psi_treated)
        d_control = d_control + (pred_control - psi_control)
    if estimand.scale == "difference":
        return width * (d_treated - d_control)
    if psi_treated <= 0.0 or psi_control <= 0.0:
        raise NumericError("ratio influence curve undefined: arm mean is zero")
    return d_treated / psi_treated - d_control / psi_control


def wald_inference(
    ic: np.ndarray, effect: float, estimand: Estimand
) -> tuple[float, float, tuple[float, float], float]:
    """Variance, SE, 95% CI, and two-sided p-value from the influence curve.

    Ratio intervals are built on the log scale and exponentiated. A
    degenerate (identically zero) curve collapses the interval and yields
    a NaN p-value.
    """
    n = ic.shape[0]
    variance = float(ic.var(ddof=1)) / n if n > 1 else 0.0
    se = float(np.sqrt(variance))
    z975 = 1.96
    if estimand.scale == "ratio":
        if effect <= 0.0:
            raise NumericError("ratio effect must be positive for log-scale inference")
        center = np.log(effect)
        ci = (float(np.exp(center - z975 * se)), float(np.exp(center + z975 * se)))
    else:
        center = effect
        ci = (effect - z975 * se, effect + z975 * se)
    if se == 0.0:
        return variance, se, (effect, effect), float("nan")
    # the null is 0 on the difference scale and log(1) = 0 on the log-ratio scale
    p = float(2.0 * stats.norm.sf(abs(center / se)))
    return variance, se, ci, p


@dataclass
class TmleFit:
    """One targeted estimate with its inference and provenance."""

    estimand: Estimand
    effect: float
    psi_treated: float
    psi_control: float
    variance: float
    se: float
    ci: tuple[float, float]
    p_value: float
    ic: np.ndarray
    outcome_spec: LearnerSpec
    ps_spec: LearnerSpec
    eps: tuple[float, float]
    bounds: OutcomeBounds
    n: int
    converged: bool

    @property
    def reject(self) -> bool:
        return bool(self.p_value < 0.05)


def run_tmle(
    dataset: TrialDataset,
    outcome_spec: LearnerSpec,
    ps_spec: LearnerSpec,
    estimand: Estimand = Estimand(),
    seed: int = 0,
) -> TmleFit:
    """Fit outcome and propensity learners, target, and return inference."""
    if outcome_spec.role != "outcome" or ps_spec.role != "propensity":
        raise ConfigError("run_tmle needs an outcome-role spec and a propensity-role spec")
    if dataset.outcome_type == "continuous":
        if estimand.scale == "ratio":
            raise ConfigError("ratio effects are not supported for continuous outcomes")
        work, bounds = bound_outcome(dataset)
    else:
        work, bounds = dataset, UNIT_BOUNDS

    trt, covs, y = work.treatment, work.covariates, work.outcome
    outcome_fit = fit_learner(outcome_spec, work, seed)
    ps_fit = fit_learner(ps_spec, work, seed)
    initial_treated = outcome_fit.predict(trt, covs, set_treatment=1)
    initial_control = outcome_fit.predict(trt, covs, set_treatment=0)
    ps = ps_fit.predict(trt, covs)
    h_treated, h_control = clever_covariates(ps, trt)
    initial_obs = np.where(trt == 1, initial_treated, initial_control)
    fluct = fluctuate(initial_obs, h_treated, h_control, y)
    targeted_treated, targeted_control = target_predictions(
        initial_treated, initial_control, ps, fluct
    )
    psi_treated = float(targeted_treated.mean())
    psi_control = float(targeted_control.mean())
    effect = estimate_effect(psi_treated, psi_control, estimand.scale, bounds)
    ic = influence_curve(
        trt, y, targeted_treated, targeted_control, ps,
        psi_treated, psi_control, estimand, bounds.width,
    )
    variance, se, ci, p = wald_inference(ic, effect, estimand)
    return TmleFit(
        estimand=estimand,
        effect=effect,
        psi_treated=float(bounds.from_unit(np.array(psi_treated))),
        psi_control=float(bounds.from_unit(np.array(psi_control))),
        variance=variance,
        se=se,
        ci=ci,
        p_value=p,
        ic=ic,
        outcome_spec=outcome_spec,
        ps_spec=ps_spec,
        eps=(fluct.eps_treated, fluct.eps_control),
        bounds=bounds,
        n=work.n,
        converged=fluct.converged and outcome_fit.converged and ps_fit.converged,
    )
