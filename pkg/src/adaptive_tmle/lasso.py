"""L1-penalised regression along a lambda path with internal cross-validation.

The solver is coordinate descent with soft-thresholding on standardised
penalised columns; the logit link wraps it in an IRLS loop. The treatment
column (outcome role) and the intercept are never penalised. Lambda is
chosen by 5-fold CV deviance, ties resolved toward the larger lambda.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from scipy.special import expit

from adaptive_tmle import glm
from adaptive_tmle.data import TrialDataset
from adaptive_tmle.errors import NumericError

N_LAMBDA = 100
LAMBDA_MIN_RATIO = 1e-3
CV_FOLDS = 5


@njit(cache=True)
def _cd_sweeps(x, z, w, penalty, lam, beta, resid, max_sweeps, tol):
    n, k = x.shape
    wx2 = np.empty(k)
    for j in range(k):
        s = 0.0
        for i in range(n):
            s += w[i] * x[i, j] * x[i, j]
        wx2[j] = s / n
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(k):
            if wx2[j] <= 1e-300:
                continue
            num = 0.0
            for i in range(n):
                num += w[i] * x[i, j] * resid[i]
            num = num / n + wx2[j] * beta[j]
            thr = lam * penalty[j]
            if num > thr:
                new = (num - thr) / wx2[j]
            elif num < -thr:
                new = (num + thr) / wx2[j]
            else:
                new = 0.0
            diff = new - beta[j]
            if diff != 0.0:
                for i in range(n):
                    resid[i] -= diff * x[i, j]
                beta[j] = new
                scaled = abs(diff) * np.sqrt(wx2[j])
                if scaled > delta:
                    delta = scaled
        if delta < tol:
            break
    return beta


@njit(cache=True)
def _solve_path(x, y, penalty, lambdas, logit, tol, max_sweeps, max_outer):
    n, k = x.shape
    nl = lambdas.size
    betas = np.zeros((nl, k))
    beta = np.zeros(k)
    for li in range(nl):
        lam = lambdas[li]
        if logit:
            for _ in range(max_outer):
                eta = x @ beta
                mu = 1.0 / (1.0 + np.exp(-eta))
                w = mu * (1.0 - mu)
                for i in range(n):
                    if w[i] < 1e-10:
                        w[i] = 1e-10
                z = eta + (y - mu) / w
                resid = z - eta
                before = beta.copy()
                _cd_sweeps(x, z, w, penalty, lam, beta, resid, max_sweeps, tol)
                moved = 0.0
                for j in range(k):
                    d = abs(beta[j] - before[j])
                    if d > moved:
                        moved = d
                if moved < 10.0 * tol:
                    break
        else:
            w = np.ones(n)
            resid = y - x @ beta
            _cd_sweeps(x, y, w, penalty, lam, beta, resid, max_sweeps, tol)
        betas[li] = beta
    return betas


def lasso_path(
    design: np.ndarray,
    y: np.ndarray,
    penalty: np.ndarray,
    lambdas: np.ndarray,
    link: str,
    tol: float = 1e-9,
    max_sweeps: int = 2000,
    max_outer: int = 50,
) -> np.ndarray:
    """Solve the penalised fits for every lambda. Columns are used as given."""
    return _solve_path(
        np.ascontiguousarray(design, dtype=float),
        np.ascontiguousarray(y, dtype=float),
        np.ascontiguousarray(penalty, dtype=float),
        np.ascontiguousarray(lambdas, dtype=float),
        link == "logit",
        tol,
        max_sweeps,
        max_outer,
    )


def _standardise(cols: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = cols.mean(axis=0) if cols.size else np.zeros(cols.shape[1])
    sd = cols.std(axis=0) if cols.size else np.ones(cols.shape[1])
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (cols - mean) / sd, mean, sd


def _assemble(treatment, covariates, include_trt):
    n = treatment.shape[0]
    base = [np.ones(n)]
    if include_trt:
        base.append(treatment.astype(float))
    std, mean, sd = _standardise(covariates)
    design = np.column_stack(base + [std]) if covariates.shape[1] else np.column_stack(base)
    penalty = np.concatenate([np.zeros(len(base)), np.ones(covariates.shape[1])])
    return design, penalty, mean, sd, len(base)


def _lambda_grid(design, y, penalty, link) -> np.ndarray:
    free = penalty == 0.0
    res = glm.fit_glm(design[:, free], y, link)
    if link == "logit":
        mu = expit(design[:, free] @ res.coef)
    else:
        mu = design[:, free] @ res.coef
    resid = y - mu
    n = y.shape[0]
    lam_max = float(np.max(np.abs(design[:, ~free].T @ resid)) / n) if (~free).any() else 0.0
    lam_max = max(lam_max, 1e-10)
    return np.geomspace(lam_max, lam_max * LAMBDA_MIN_RATIO, N_LAMBDA)


def _deviance(y: np.ndarray, mu: np.ndarray, link: str) -> np.ndarray:
    if link == "logit":
        mu = np.clip(mu, 1e-12, 1.0 - 1e-12)
        return -2.0 * (y * np.log(mu) + (1.0 - y) * np.log1p(-mu))
    return (y - mu) ** 2


class LassoFit:
    """Penalised regression refit at the CV-chosen lambda, original scale."""

    def __init__(self, spec, include_trt, coef, lambda_value, lambda_index, clip):
        self.spec = spec
        self.converged = True
        self.include_trt = include_trt
        self.coef = coef
        self.lambda_value = lambda_value
        self.lambda_index = lambda_index
        self.clip = clip

    def predict(self, treatment, covariates, set_treatment=None):
        trt = treatment if set_treatment is None else np.full(treatment.shape[0], set_treatment)
        eta = np.full(treatment.shape[0], self.coef[0])
        pos = 1
        if self.include_trt:
            eta = eta + self.coef[1] * trt
            pos = 2
        if covariates.shape[1]:
            eta = eta + covariates @ self.coef[pos:]
        lo, hi = self.clip
        return np.clip(expit(eta), lo, hi)


def fit_lasso(spec, dataset: TrialDataset, seed: int) -> LassoFit:
    """Fit the lasso learner for its role; seed drives the internal CV folds."""
    from adaptive_tmle.learners import OUTCOME_CLIP, PS_CLIP

    include_trt = spec.role == "outcome"
    clip = OUTCOME_CLIP if spec.role == "outcome" else PS_CLIP
    if spec.role == "outcome":
        y = dataset.outcome
    else:
        y = dataset.treatment.astype(float)
    trt = dataset.treatment
    covs = dataset.covariates
    n = dataset.n

    if covs.shape[1] == 0:
        design, penalty, *_ = _assemble(trt, covs, include_trt)
        res = glm.fit_glm(design, y, "logit")
        return LassoFit(spec, include_trt, res.coef, 0.0, 0, clip)

    design, penalty, mean, sd, n_free = _assemble(trt, covs, include_trt)
    lambdas = _lambda_grid(design, y, penalty, "logit")

    rng = np.random.default_rng(seed)
    fold_ids = np.empty(n, dtype=int)
    fold_ids[rng.permutation(n)] = np.arange(n) % CV_FOLDS
    total_dev = np.zeros(N_LAMBDA)
    for v in range(CV_FOLDS):
        test = fold_ids == v
        train = ~test
        tr_design, tr_pen, tr_mean, tr_sd, _ = _assemble(trt[train], covs[train], include_trt)
        betas = lasso_path(tr_design, y[train], tr_pen, lambdas, "logit",
                           tol=1e-7, max_sweeps=500, max_outer=25)
        te_std = (covs[test] - tr_mean) / tr_sd
        te_base = [np.ones(test.sum())]
        if include_trt:
            te_base.append(trt[test].astype(float))
        te_design = np.column_stack(te_base + [te_std])
        mu = expit(te_design @ betas.T)
        total_dev += _deviance(y[test][:, None], mu, "logit").sum(axis=0)
    chosen = int(np.argmin(total_dev))

    betas = lasso_path(design, y, penalty, lambdas, "logit",
                       tol=1e-8, max_sweeps=1000, max_outer=30)
    beta_std = betas[chosen]
    if not np.isfinite(beta_std).all():
        raise NumericError("lasso path produced non-finite coefficients")
    coef = np.empty(n_free + covs.shape[1])
    coef[:n_free] = beta_std[:n_free]
    coef[n_free:] = beta_std[n_free:] / sd
    coef[0] -= float((beta_std[n_free:] * mean / sd).sum())
    return LassoFit(spec, include_trt, coef, float(lambdas[chosen]), chosen, clip)
