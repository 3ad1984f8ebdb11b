"""Multivariate adaptive regression splines, degree 2, with logistic refit.

The forward pass adds reflected hinge pairs greedily by squared-error
improvement; knots are restricted to observed predictor values (thinned to
a quantile subset for speed). The backward pass prunes by GCV with cost
penalty 3, and the pruned basis is refit with a logit link so predictions
stay inside the unit interval.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from adaptive_tmle import glm
from adaptive_tmle.data import TrialDataset

MAX_TERMS = 21
MAX_DEGREE = 2
GCV_PENALTY = 3.0
MAX_KNOTS = 12
SCREEN_TOP = 3


def _candidate_knots(x: np.ndarray) -> np.ndarray:
    vals = np.unique(x)
    if vals.size <= 2:
        return vals[:1]
    interior = vals[1:-1]
    if interior.size <= MAX_KNOTS:
        return interior
    idx = np.unique(np.round(np.linspace(0, interior.size - 1, MAX_KNOTS)).astype(int))
    return interior[idx]


def _term_vars(term: tuple) -> set[int]:
    return {factor[0] for factor in term}


def _build_basis(terms, predictors: np.ndarray) -> np.ndarray:
    n = predictors.shape[0]
    basis = np.ones((n, len(terms)))
    for i, term in enumerate(terms):
        for var, sign, knot in term:
            basis[:, i] *= np.maximum(0.0, sign * (predictors[:, var] - knot))
    return basis


def _pair_reduction(a, b, d, u, w):
    """RSS drop from adding two residualised columns with Gram [[a,b],[b,d]]."""
    det = a * d - b * b
    single_p = np.where(a > 1e-12, u * u / np.where(a > 1e-12, a, 1.0), 0.0)
    single_m = np.where(d > 1e-12, w * w / np.where(d > 1e-12, d, 1.0), 0.0)
    single = np.maximum(single_p, single_m)
    ok = det > 1e-10 * np.maximum(a * d, 1e-300)
    pair = np.where(
        ok,
        (d * u * u - 2.0 * b * u * w + a * w * w) / np.where(ok, det, 1.0),
        single,
    )
    return np.maximum(pair, single)


def _forward(predictors: np.ndarray, y: np.ndarray) -> tuple[list[tuple], np.ndarray]:
    n, n_vars = predictors.shape
    terms: list[tuple] = [()]
    basis = np.ones((n, 1))
    knots = [_candidate_knots(predictors[:, v]) for v in range(n_vars)]
    hp = [np.maximum(0.0, predictors[:, v][:, None] - knots[v][None, :]) for v in range(n_vars)]
    hm = [np.maximum(0.0, knots[v][None, :] - predictors[:, v][:, None]) for v in range(n_vars)]
    hp2 = [h * h for h in hp]
    hm2 = [h * h for h in hm]
    hpm = [hp[v] * hm[v] for v in range(n_vars)]

    while len(terms) + 2 <= MAX_TERMS:
        q, _ = np.linalg.qr(basis)
        resid = y - q @ (q.T @ y)
        rss = float(resid @ resid)
        if rss <= 1e-12:
            break
        best_red = 1e-5 * rss
        best = None
        for var in range(n_vars):
            if knots[var].size == 0:
                continue
            parents = [
                i
                for i, t in enumerate(terms)
                if len(t) < MAX_DEGREE and var not in _term_vars(t)
            ]
            if not parents:
                continue
            pb = basis[:, parents]
            pb2 = pb * pb
            u = (pb * resid[:, None]).T @ hp[var]
            w = (pb * resid[:, None]).T @ hm[var]
            a0 = pb2.T @ hp2[var]
            d0 = pb2.T @ hm2[var]
            b0 = pb2.T @ hpm[var]
            screen = _pair_reduction(a0, b0, d0, u, w)
            flat = screen.ravel()
            top = np.argsort(flat)[::-1][:SCREEN_TOP]
            for t in top:
                if flat[t] <= best_red:
                    break
                pi, ki = divmod(int(t), knots[var].size)
                parent = parents[pi]
                cp = basis[:, parent] * hp[var][:, ki]
                cm = basis[:, parent] * hm[var][:, ki]
                cp_perp = cp - q @ (q.T @ cp)
                cm_perp = cm - q @ (q.T @ cm)
                a = float(cp_perp @ cp_perp)
                b = float(cp_perp @ cm_perp)
                d = float(cm_perp @ cm_perp)
                uu = float(cp @ resid)
                ww = float(cm @ resid)
                red = float(_pair_reduction(np.array(a), np.array(b), np.array(d), np.array(uu), np.array(ww)))
                if red > best_red:
                    best_red = red
                    best = (parent, var, float(knots[var][ki]), cp, cm, cp_perp, cm_perp)
        if best is None:
            break
        parent, var, knot, cp, cm, cp_perp, cm_perp = best
        parent_term = terms[parent]
        added = False
        if float(cp_perp @ cp_perp) > 1e-10 * max(float(cp @ cp), 1e-300):
            terms.append(parent_term + ((var, 1.0, knot),))
            basis = np.column_stack([basis, cp])
            added = True
        if len(terms) < MAX_TERMS and float(cm_perp @ cm_perp) > 1e-10 * max(
            float(cm @ cm), 1e-300
        ):
            terms.append(parent_term + ((var, -1.0, knot),))
            basis = np.column_stack([basis, cm])
            added = True
        if not added:
            break
    return terms, basis


def _gcv(rss: float, n: int, m: int) -> float:
    cost = m + GCV_PENALTY * (m - 1) / 2.0
    if cost >= n:
        return np.inf
    return (rss / n) / (1.0 - cost / n) ** 2


def _subset_rss(gram, xty, yty, idx) -> float:
    g = gram[np.ix_(idx, idx)]
    h = xty[idx]
    try:
        beta = np.linalg.solve(g, h)
    except np.linalg.LinAlgError:
        return np.inf
    return max(float(yty - h @ beta), 0.0)


def _backward(basis: np.ndarray, y: np.ndarray) -> tuple[list[int], float, float]:
    """Prune terms one at a time by GCV; returns (kept, gcv_pruned, gcv_forward)."""
    n, m = basis.shape
    gram = basis.T @ basis
    xty = basis.T @ y
    yty = float(y @ y)
    current = list(range(m))
    gcv_full = _gcv(_subset_rss(gram, xty, yty, current), n, m)
    best_sets = current[:]
    best_gcv = gcv_full
    while len(current) > 1:
        trial_gcv = np.inf
        trial = None
        for pos in range(1, len(current)):  # never drop the intercept
            cand = current[:pos] + current[pos + 1 :]
            g = _gcv(_subset_rss(gram, xty, yty, cand), n, len(cand))
            if g < trial_gcv:
                trial_gcv = g
                trial = cand
        if trial is None:
            break
        current = trial
        if trial_gcv < best_gcv:
            best_gcv = trial_gcv
            best_sets = current[:]
    return best_sets, best_gcv, gcv_full


class MarsFit:
    """Pruned hinge basis with logistic coefficients."""

    def __init__(self, spec, terms, coef, screened, include_trt, clip, converged,
                 gcv_pruned, gcv_forward):
        self.spec = spec
        self.terms = terms
        self.coef = coef
        self.screened = screened
        self.include_trt = include_trt
        self.clip = clip
        self.converged = converged
        self.gcv_pruned = gcv_pruned
        self.gcv_forward = gcv_forward

    def _predictors(self, treatment, covariates, set_treatment):
        cols = []
        if self.include_trt:
            trt = treatment if set_treatment is None else np.full(treatment.shape[0], set_treatment)
            cols.append(trt.astype(float))
        covs = covariates[:, self.screened] if self.screened is not None else covariates
        return np.column_stack(cols + [covs]) if cols else covs

    def predict(self, treatment, covariates, set_treatment=None):
        pred = self._predictors(treatment, covariates, set_treatment)
        basis = _build_basis(self.terms, pred)
        lo, hi = self.clip
        return np.clip(expit(basis @ self.coef), lo, hi)


def fit_mars(spec, dataset: TrialDataset, screened: tuple[int, ...] | None = None) -> MarsFit:
    """Fit the spline learner for its role, optionally on screened covariates."""
    from adaptive_tmle.learners import OUTCOME_CLIP, PS_CLIP

    include_trt = spec.role == "outcome"
    clip = OUTCOME_CLIP if spec.role == "outcome" else PS_CLIP
    y = dataset.outcome if spec.role == "outcome" else dataset.treatment.astype(float)
    covs = dataset.covariates if screened is None else dataset.covariates[:, list(screened)]
    cols = []
    if include_trt:
        cols.append(dataset.treatment.astype(float))
    predictors = np.column_stack(cols + [covs]) if cols or covs.shape[1] else np.zeros((dataset.n, 0))
    if predictors.shape[1] == 0:
        res = glm.fit_glm(np.ones((dataset.n, 1)), y, "logit")
        return MarsFit(spec, [()], res.coef, screened, include_trt, clip, res.converged,
                       np.nan, np.nan)

    terms, basis = _forward(predictors, y)
    kept, gcv_pruned, gcv_forward = _backward(basis, y)
    pruned_terms = [terms[i] for i in kept]
    res = glm.fit_glm(basis[:, kept], y, "logit")
    return MarsFit(spec, pruned_terms, res.coef, screened, include_trt, clip, res.converged,
                   gcv_pruned, gcv_forward)
