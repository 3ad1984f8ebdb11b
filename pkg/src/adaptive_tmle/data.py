"""Trial dataset container, CSV ingestion, outcome bounding, folds, subgroups."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from adaptive_tmle.errors import ConfigError, DataError

_MISSING_TOKENS = {"", "na", "nan", "null", "none"}


@dataclass(frozen=True)
class TrialDataset:
    """Two-arm trial data in analysis-ready form.

    covariates: (n, p) float array, p may be 0.
    treatment: (n,) int array of 0/1 arm indicators.
    outcome: (n,) float array; binary outcomes are coded 0/1.
    allocation_prob: known or empirical probability of assignment to arm 1.
    outcome_type: "binary" or "continuous".
    strata: optional (n,) int labels used for restricted permutations.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    allocation_prob: float
    outcome_type: str
    covariate_names: tuple[str, ...]
    strata: np.ndarray | None = None

    def __post_init__(self) -> None:
        cov = np.asarray(self.covariates, dtype=float)
        trt = np.asarray(self.treatment, dtype=int)
        out = np.asarray(self.outcome, dtype=float)
        if cov.ndim != 2:
            raise DataError("covariates must be a 2-d array")
        n = cov.shape[0]
        if trt.shape != (n,) or out.shape != (n,):
            raise DataError("treatment/outcome length does not match covariates")
        if n == 0:
            raise DataError("dataset has no rows")
        if not np.isfinite(cov).all() or not np.isfinite(out).all():
            raise DataError("covariates and outcome must be finite")
        if not np.isin(trt, (0, 1)).all():
            raise DataError("treatment must be coded 0/1")
        if trt.sum() == 0 or trt.sum() == n:
            raise DataError("both arms must be present")
        if self.outcome_type not in ("binary", "continuous"):
            raise DataError(f"unknown outcome_type {self.outcome_type!r}")
        if self.outcome_type == "binary" and not np.isin(out, (0.0, 1.0)).all():
            raise DataError("binary outcome must be coded 0/1")
        if not 0.0 < self.allocation_prob < 1.0:
            raise DataError("allocation_prob must lie in (0, 1)")
        if len(self.covariate_names) != cov.shape[1]:
            raise DataError("covariate_names length does not match covariates")
        if self.strata is not None:
            strata = np.asarray(self.strata, dtype=int)
            if strata.shape != (n,):
                raise DataError("strata length does not match covariates")
            object.__setattr__(self, "strata", strata)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "treatment", trt)
        object.__setattr__(self, "outcome", out)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]


@dataclass(frozen=True)
class OutcomeBounds:
    """Affine map between the natural outcome scale and the unit interval."""

    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_unit(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.lower) / self.width

    def from_unit(self, y: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(y, dtype=float) * self.width


UNIT_BOUNDS = OutcomeBounds(0.0, 1.0)


def bound_outcome(dataset: TrialDataset) -> tuple[TrialDataset, OutcomeBounds]:
    """Rescale a continuous outcome to [0, 1] using its observed range.

    The returned bounds invert the map; estimates computed on the unit scale
    are multiplied back by the range. Binary outcomes are rejected because
    they are already on the unit scale.
    """
    if dataset.outcome_type != "continuous":
        raise DataError("bound_outcome applies only to continuous outcomes")
    lo = float(dataset.outcome.min())
    hi = float(dataset.outcome.max())
    if hi <= lo:
        raise DataError("outcome is constant; nothing to estimate")
    bounds = OutcomeBounds(lo, hi)
    rescaled = replace(dataset, outcome=bounds.to_unit(dataset.outcome))
    return rescaled, bounds


def make_folds(dataset: TrialDataset, v: int, seed) -> np.ndarray:
    """Assign each unit a fold id in 0..v-1, stratified by arm.

    Within each arm fold sizes differ by at most one. v must lie in
    2..min(arm sizes); v == n is also accepted and yields leave-one-out
    folds. Deterministic given the seed.
    """
    n = dataset.n
    if v == n:
        return np.arange(n)
    n1 = int(dataset.treatment.sum())
    n0 = n - n1
    if not 2 <= v <= min(n1, n0):
        raise ConfigError(
            f"v must be between 2 and the smaller arm size ({min(n1, n0)}), or equal n; got {v}"
        )
    rng = np.random.default_rng(seed)
    fold_ids = np.empty(n, dtype=int)
    for arm in (1, 0):
        idx = np.flatnonzero(dataset.treatment == arm)
        perm = rng.permutation(idx)
        fold_ids[perm] = np.arange(perm.size) % v
    return fold_ids


def subgroup(dataset: TrialDataset, mask: np.ndarray) -> TrialDataset:
    """Restrict the dataset to mask, recomputing the empirical allocation."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (dataset.n,):
        raise DataError("subgroup mask length does not match dataset")
    if not mask.any():
        raise DataError("subgroup is empty")
    trt = dataset.treatment[mask]
    if trt.sum() == 0 or trt.sum() == trt.size:
        raise DataError("subgroup does not contain both arms")
    return TrialDataset(
        covariates=dataset.covariates[mask],
        treatment=trt,
        outcome=dataset.outcome[mask],
        allocation_prob=float(trt.mean()),
        outcome_type=dataset.outcome_type,
        covariate_names=dataset.covariate_names,
        strata=None if dataset.strata is None else dataset.strata[mask],
    )


_COMPARISON = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*(<=|>=|==|!=|<|>)\s*(-?\d+(?:\.\d+)?)\s*$")


def subgroup_mask(dataset: TrialDataset, expr: str) -> np.ndarray:
    """Evaluate a subgroup expression against named covariates.

    Supported form: comparisons `name OP number` joined by `&`, with OP one
    of < <= > >= == !=. Example: "age>=50 & male==0".
    """
    mask = np.ones(dataset.n, dtype=bool)
    ops = {
        "<": np.less,
        "<=": np.less_equal,
        ">": np.greater,
        ">=": np.greater_equal,
        "==": np.equal,
        "!=": np.not_equal,
    }
    for clause in expr.split("&"):
        m = _COMPARISON.match(clause)
        if m is None:
            raise ConfigError(f"cannot parse subgroup clause {clause.strip()!r}")
        name, op, value = m.group(1), m.group(2), float(m.group(3))
        if name not in dataset.covariate_names:
            raise ConfigError(f"unknown covariate {name!r} in subgroup expression")
        col = dataset.covariates[:, dataset.covariate_names.index(name)]
        mask &= ops[op](col, value)
    return mask


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for load_csv.

    outcome_type "auto" infers binary when all outcome values are 0/1.
    """

    treatment: str
    outcome: str
    covariates: tuple[str, ...]
    strata: str | None = None
    outcome_type: str = "auto"


def _parse_cell(raw: str, row: int, column: str) -> float:
    token = raw.strip()
    if token.lower() in _MISSING_TOKENS:
        raise DataError(f"missing value at row {row}, column {column!r}")
    try:
        return float(token)
    except ValueError:
        raise DataError(f"non-numeric value {raw!r} at row {row}, column {column!r}") from None


def load_csv(path: str, schema: CsvSchema) -> TrialDataset:
    """Read a trial CSV into a TrialDataset.

    Rows are numbered from 1 (header excluded) in error messages. The
    allocation probability is the empirical treated fraction.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        wanted = [schema.treatment, schema.outcome, *schema.covariates]
        if schema.strata is not None:
            wanted.append(schema.strata)
        for name in wanted:
            if name not in header:
                raise DataError(f"column {name!r} not found in {path}")
        col_idx = {name: header.index(name) for name in wanted}
        rows: list[list[float]] = []
        for row_num, record in enumerate(reader, start=1):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise DataError(f"row {row_num} has {len(record)} fields, expected {len(header)}")
            rows.append([_parse_cell(record[col_idx[name]], row_num, name) for name in wanted])
    if not rows:
        raise DataError(f"{path} contains no data rows")
    table = np.asarray(rows, dtype=float)
    trt_raw = table[:, 0]
    if not np.isin(trt_raw, (0.0, 1.0)).all():
        bad = int(np.flatnonzero(~np.isin(trt_raw, (0.0, 1.0)))[0]) + 1
        raise DataError(f"treatment column {schema.treatment!r} has non-0/1 value at row {bad}")
    outcome = table[:, 1]
    p = len(schema.covariates)
    covariates = table[:, 2 : 2 + p].reshape(len(rows), p)
    strata = None
    if schema.strata is not None:
        strata = table[:, 2 + p].astype(int)
    if schema.outcome_type == "auto":
        outcome_type = "binary" if np.isin(outcome, (0.0, 1.0)).all() else "continuous"
    else:
        outcome_type = schema.outcome_type
    treatment = trt_raw.astype(int)
    return TrialDataset(
        covariates=covariates,
        treatment=treatment,
        outcome=outcome,
        allocation_prob=float(treatment.mean()),
        outcome_type=outcome_type,
        covariate_names=tuple(schema.covariates),
        strata=strata,
    )


def arm_means(dataset: TrialDataset) -> tuple[float, float]:
    """Mean outcome among treated and control units."""
    treated = dataset.treatment == 1
    return float(dataset.outcome[treated].mean()), float(dataset.outcome[~treated].mean())


def check_covariates(dataset: TrialDataset, indices: Sequence[int]) -> None:
    """Validate covariate indices against the dataset width."""
    for j in indices:
        if not 0 <= j < dataset.n_covariates:
            raise ConfigError(f"covariate index {j} out of range for p={dataset.n_covariates}")
