"""Hinge-basis spline learner: forward recovery, pruning, clipping."""

import numpy as np
import pytest
from scipy.special import expit

from adaptive_tmle import mars
from adaptive_tmle.data import TrialDataset
from adaptive_tmle.learners import LearnerSpec, fit_learner


def grid_predictor(n_unique=13, reps=10, seed=0):
    """Few distinct values so every interior point is a candidate knot."""
    x = np.tile(np.linspace(-1.5, 1.5, n_unique), reps)
    rng = np.random.default_rng(seed)
    return rng.permutation(x)


def make_dataset(x, outcome, outcome_type="continuous"):
    n = x.shape[0]
    trt = np.tile([0, 1], n // 2)
    return TrialDataset(
        covariates=x if x.ndim == 2 else x[:, None],
        treatment=trt,
        outcome=outcome,
        allocation_prob=0.5,
        outcome_type=outcome_type,
        covariate_names=tuple(f"x{j}" for j in range(x.shape[1] if x.ndim == 2 else 1)),
    )


class TestForwardPass:
    def test_exact_hinge_recovered(self):
        x = grid_predictor()
        knot = 0.0
        y = 1.0 + 2.0 * np.maximum(x - knot, 0.0)
        terms, basis = mars._forward(x[:, None], y)
        hinge_terms = [t for t in terms if t]
        assert ((0, 1.0, knot),) in hinge_terms
        coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
        resid = y - basis @ coef
        assert float(resid @ resid) < 1e-16 * x.shape[0]

    def test_constant_target_stops_at_intercept(self):
        x = grid_predictor(seed=1)
        y = np.full(x.shape[0], 0.4)
        terms, basis = mars._forward(x[:, None], y)
        assert terms == [()]
        assert basis.shape[1] == 1


class TestBackwardPass:
    def test_pruned_gcv_never_worse(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(80)
        y = np.maximum(x, 0.0) + 0.3 * rng.standard_normal(80)
        terms, basis = mars._forward(x[:, None], y)
        kept, gcv_pruned, gcv_forward = mars._backward(basis, y)
        assert gcv_pruned <= gcv_forward
        assert 0 in kept

    def test_useless_column_pruned_from_manual_basis(self):
        # the reflected hinge has a true coefficient of zero, so under mild
        # noise its RSS contribution cannot justify the GCV cost of keeping it
        x = grid_predictor(seed=3)
        rng = np.random.default_rng(3)
        y = 1.0 + 2.0 * np.maximum(x, 0.0) + 0.1 * rng.standard_normal(x.shape[0])
        basis = np.column_stack(
            [np.ones(x.shape[0]), np.maximum(x, 0.0), np.maximum(-x, 0.0)]
        )
        kept, gcv_pruned, gcv_forward = mars._backward(basis, y)
        assert kept == [0, 1]
        assert gcv_pruned < gcv_forward


class TestFitMars:
    @pytest.mark.property
    def test_single_hinge_probability_mse(self):
        x = grid_predictor(seed=4)
        p = expit(-0.3 + 1.2 * np.maximum(x, 0.0))
        data = make_dataset(x, p)
        fit = mars.fit_mars(LearnerSpec("mars", "outcome"), data)
        pred = fit.predict(data.treatment, data.covariates)
        mse = float(np.mean((pred - p) ** 2))
        assert mse < 1e-3

    def test_gcv_attributes_ordered(self):
        rng = np.random.default_rng(5)
        n = 150
        covs = rng.standard_normal((n, 2))
        trt = np.tile([0, 1], n // 2)
        y = rng.binomial(1, expit(covs[:, 0])).astype(float)
        data = TrialDataset(
            covariates=covs,
            treatment=trt,
            outcome=y,
            allocation_prob=0.5,
            outcome_type="binary",
            covariate_names=("x0", "x1"),
        )
        fit = mars.fit_mars(LearnerSpec("mars", "outcome"), data)
        assert fit.gcv_pruned <= fit.gcv_forward

    def test_constant_probability_is_flat(self):
        x = grid_predictor(seed=6)
        p = np.full(x.shape[0], 0.37)
        data = make_dataset(x, p)
        fit = mars.fit_mars(LearnerSpec("mars", "outcome"), data)
        pred = fit.predict(data.treatment, data.covariates)
        np.testing.assert_allclose(pred, 0.37, atol=1e-6)

    def test_zero_covariates_intercept_only(self):
        n = 80
        rng = np.random.default_rng(7)
        trt = rng.permutation(np.repeat([0, 1], n // 2))
        y = rng.binomial(1, 0.5, n).astype(float)
        data = TrialDataset(
            covariates=np.empty((n, 0)),
            treatment=trt,
            outcome=y,
            allocation_prob=0.5,
            outcome_type="binary",
            covariate_names=(),
        )
        fit = mars.fit_mars(LearnerSpec("mars", "propensity"), data)
        assert fit.terms == [()]
        pred = fit.predict(data.treatment, data.covariates)
        assert np.unique(pred).size == 1
        assert pred[0] == pytest.approx(trt.mean(), abs=1e-6)

    def test_screened_covariates_ignore_rest(self):
        rng = np.random.default_rng(8)
        n = 120
        covs = rng.standard_normal((n, 3))
        p = expit(0.8 * covs[:, 1])
        data = make_dataset(covs, p)
        fit = mars.fit_mars(LearnerSpec("mars", "outcome"), data, screened=(1,))
        assert fit.screened == (1,)
        perturbed = covs.copy()
        perturbed[:, 0] += 5.0
        perturbed[:, 2] -= 5.0
        base = fit.predict(data.treatment, covs)
        after = fit.predict(data.treatment, perturbed)
        np.testing.assert_array_equal(base, after)

    def test_screened_mars_learner_runs(self):
        rng = np.random.default_rng(9)
        n = 160
        covs = rng.standard_normal((n, 5))
        trt = rng.permutation(np.repeat([0, 1], n // 2))
        y = rng.binomial(1, expit(covs[:, 0] + 0.5 * trt)).astype(float)
        data = TrialDataset(
            covariates=covs,
            treatment=trt,
            outcome=y,
            allocation_prob=0.5,
            outcome_type="binary",
            covariate_names=tuple(f"x{j}" for j in range(5)),
        )
        fit = fit_learner(LearnerSpec("screened_mars", "outcome"), data)
        assert fit.screened is not None
        assert len(fit.screened) <= mars.SCREEN_TOP
        pred = fit.predict(data.treatment, data.covariates)
        assert pred.shape == (n,)

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        n = 100
        covs = rng.standard_normal((n, 2))
        trt = np.tile([0, 1], n // 2)
        y = rng.binomial(1, expit(covs[:, 0])).astype(float)
        data = TrialDataset(
            covariates=covs,
            treatment=trt,
            outcome=y,
            allocation_prob=0.5,
            outcome_type="binary",
            covariate_names=("x0", "x1"),
        )
        fit_a = mars.fit_mars(LearnerSpec("mars", "outcome"), data)
        fit_b = mars.fit_mars(LearnerSpec("mars", "outcome"), data)
        assert fit_a.terms == fit_b.terms
        np.testing.assert_array_equal(fit_a.coef, fit_b.coef)
