"""Design-matrix terms and an IRLS fitter for logit and identity links.

Outcomes may be fractional (bounded continuous responses rescaled to [0, 1]),
so the logit branch maximises the quasi-binomial log likelihood. Collinear
columns are dropped left to right before fitting; their coefficients are
reported as exact zeros.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

CONST = ("const",)
TRT = ("trt",)


def cov(j: int) -> tuple:
    return ("cov", j)

def trt_cov(j: int) -> tuple:
    return ("trt_cov", j)

def cov_cov(j: int, k: int) -> tuple:
    return ("cov_cov", j, k) if j < k else ("cov_cov", k, j)


def term_label(term: tuple, names: tuple[str, ...]) -> str:
    kind = term[0]
    if kind == "const":
        return "1"
    if kind == "trt":
        return "trt"
    if kind == "cov":
        return names[term[1]]
    if kind == "trt_cov":
        return f"trt:{names[term[1]]}"
    return f"{names[term[1]]}:{names[term[2]]}"


def build_design(terms, treatment: np.ndarray, covariates: np.ndarray) -> np.ndarray:
    """Stack term columns for the given rows. treatment may be overridden upstream."""
    n = treatment.shape[0]
    cols = np.empty((n, len(terms)))
    for i, term in enumerate(terms):
        kind = term[0]
        if kind == "const":
            cols[:, i] = 1.0
        elif kind == "trt":
            cols[:, i] = treatment
        elif kind == "cov":
            cols[:, i] = covariates[:, term[1]]
        elif kind == "trt_cov":
            cols[:, i] = treatment * covariates[:, term[1]]
        elif kind == "cov_cov":
            cols[:, i] = covariates[:, term[1]] * covariates[:, term[2]]
        else:
            raise ValueError(f"unknown term {term!r}")
    return cols


def independent_columns(design: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    """Boolean mask of columns to keep, dropping collinear ones left to right.

    Uses the unpivoted QR diagonal: |R[j, j]| small relative to the column
    norm means column j lies in the span of the columns before it.
    """
    n, k = design.shape
    if k == 0:
        return np.zeros(0, dtype=bool)
    r = np.linalg.qr(design, mode="r")
    diag = np.abs(np.diag(r))
    norms = np.sqrt(np.maximum((design * design).sum(axis=0), 0.0))
    keep = np.zeros(k, dtype=bool)
    limit = min(n, k)
    keep[:limit] = (diag >= rtol * norms[:limit]) & (norms[:limit] > 0.0)
    return keep


@dataclass
class GlmResult:
    coef: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    kept: np.ndarray


def _binomial_loglik(y: np.ndarray, mu: np.ndarray) -> float:
    mu = np.clip(mu, 1e-12, 1.0 - 1e-12)
    return float(y @ np.log(mu) + (1.0 - y) @ np.log1p(-mu))


def _newton_logit(x, y, off, beta_init, max_iter, tol):
    """Newton with step halving; raises LinAlgError on a singular system."""
    beta = beta_init.copy()
    mu = expit(x @ beta + off)
    ll = _binomial_loglik(y, mu)
    converged = False
    iterations = 0
    for _ in range(max_iter):
        score = x.T @ (y - mu)
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        w = np.maximum(mu * (1.0 - mu), 1e-10)
        xtwx = (x * w[:, None]).T @ x
        step = np.linalg.solve(xtwx, score)
        if not np.isfinite(step).all():
            raise np.linalg.LinAlgError("non-finite Newton step")
        # step halving keeps separation and extreme offsets from diverging
        new_beta = beta + step
        new_mu = expit(x @ new_beta + off)
        new_ll = _binomial_loglik(y, new_mu)
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 12:
            step *= 0.5
            new_beta = beta + step
            new_mu = expit(x @ new_beta + off)
            new_ll = _binomial_loglik(y, new_mu)
            halvings += 1
        beta, mu, ll = new_beta, new_mu, new_ll
        iterations += 1
    return beta, converged, iterations, ll


def fit_glm(
    design: np.ndarray,
    y: np.ndarray,
    link: str,
    offset: np.ndarray | None = None,
    beta0: np.ndarray | None = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> GlmResult:
    """Fit y on design with the given link by Newton iteration.

    Convergence is the max-norm of the score dropping below tol, checked
    before each update so an already-solved score returns beta0 unchanged.
    If max_iter is hit the last iterate is returned with converged False.
    Singular systems trigger the left-to-right collinear-column drop.
    """
    n, k_full = design.shape
    off = np.zeros(n) if offset is None else offset

    if link == "logit":
        # fast path: assume full rank, fall back to the QR filter if not
        start = np.zeros(k_full) if beta0 is None else np.asarray(beta0, dtype=float)
        try:
            beta, converged, iterations, ll = _newton_logit(design, y, off, start, max_iter, tol)
            return GlmResult(beta, converged, iterations, ll, np.ones(k_full, dtype=bool))
        except np.linalg.LinAlgError:
            pass
    elif link != "identity":
        raise ValueError(f"unknown link {link!r}")

    keep = independent_columns(design)
    if not keep.all():
        log.warning("dropping %d collinear design column(s)", int((~keep).sum()))
    x = design[:, keep]
    k = x.shape[1]
    coef_full = np.zeros(k_full)
    if k == 0:
        mu = expit(off) if link == "logit" else off
        ll = _binomial_loglik(y, mu) if link == "logit" else _gaussian_loglik(y, mu)
        return GlmResult(coef_full, True, 0, ll, keep)

    if link == "identity":
        target = y - off
        coef, *_ = np.linalg.lstsq(x, target, rcond=None)
        mu = x @ coef + off
        coef_full[keep] = coef
        return GlmResult(coef_full, True, 1, _gaussian_loglik(y, mu), keep)

    start = np.zeros(k) if beta0 is None else np.asarray(beta0, dtype=float)[keep].copy()
    try:
        beta, converged, iterations, ll = _newton_logit(x, y, off, start, max_iter, tol)
    except np.linalg.LinAlgError:
        mu = expit(x @ start + off)
        return GlmResult(coef_full, False, 0, _binomial_loglik(y, mu), keep)
    coef_full[keep] = beta
    return GlmResult(coef_full, converged, iterations, ll, keep)


def _gaussian_loglik(y: np.ndarray, mu: np.ndarray) -> float:
    n = y.shape[0]
    rss = float(((y - mu) ** 2).sum())
    if rss <= 0.0:
        rss = 1e-300
    return -0.5 * n * (np.log(2.0 * np.pi * rss / n) + 1.0)
