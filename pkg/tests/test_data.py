"""Dataset container, CSV ingestion, folds, bounding, subgroups."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_tmle.data import (
    CsvSchema,
    OutcomeBounds,
    TrialDataset,
    arm_means,
    bound_outcome,
    load_csv,
    make_folds,
    subgroup,
    subgroup_mask,
)
from adaptive_tmle.errors import ConfigError, DataError


def make_dataset(n=20, p=3, seed=0, outcome_type="continuous", allocation=0.5):
    rng = np.random.default_rng(seed)
    covs = rng.standard_normal((n, p))
    trt = np.zeros(n, dtype=int)
    trt[: n // 2] = 1
    trt = rng.permutation(trt)
    if outcome_type == "binary":
        y = rng.binomial(1, 0.5, n).astype(float)
        if y.min() == y.max():
            y[0] = 1.0 - y[0]
    else:
        y = rng.standard_normal(n) * 3.0 + 10.0
    return TrialDataset(
        covariates=covs,
        treatment=trt,
        outcome=y,
        allocation_prob=allocation,
        outcome_type=outcome_type,
        covariate_names=tuple(f"x{j}" for j in range(p)),
    )


class TestTrialDataset:
    def test_arrays_coerced_and_valid(self):
        data = make_dataset()
        assert data.covariates.dtype == float
        assert data.treatment.dtype == int
        assert data.n == 20
        assert data.n_covariates == 3

    def test_rejects_one_arm(self):
        with pytest.raises(DataError, match="both arms"):
            TrialDataset(
                covariates=np.zeros((4, 1)),
                treatment=np.ones(4, dtype=int),
                outcome=np.zeros(4),
                allocation_prob=0.5,
                outcome_type="binary",
                covariate_names=("x0",),
            )

    def test_rejects_non_binary_outcome_coding(self):
        with pytest.raises(DataError, match="0/1"):
            TrialDataset(
                covariates=np.zeros((4, 0)),
                treatment=np.array([0, 1, 0, 1]),
                outcome=np.array([0.0, 2.0, 0.0, 1.0]),
                allocation_prob=0.5,
                outcome_type="binary",
                covariate_names=(),
            )

    def test_rejects_nonfinite_covariates(self):
        covs = np.zeros((4, 1))
        covs[2, 0] = np.nan
        with pytest.raises(DataError, match="finite"):
            TrialDataset(
                covariates=covs,
                treatment=np.array([0, 1, 0, 1]),
                outcome=np.zeros(4),
                allocation_prob=0.5,
                outcome_type="continuous",
                covariate_names=("x0",),
            )

    def test_rejects_bad_allocation(self):
        with pytest.raises(DataError, match="allocation"):
            make_dataset(allocation=1.0)


class TestBoundOutcome:
    def test_unit_interval_and_inversion(self):
        data = make_dataset(seed=3)
        scaled, bounds = bound_outcome(data)
        assert scaled.outcome.min() == 0.0
        assert scaled.outcome.max() == 1.0
        back = bounds.from_unit(scaled.outcome)
        np.testing.assert_allclose(back, data.outcome, atol=1e-12)

    def test_width_positive(self):
        _, bounds = bound_outcome(make_dataset(seed=4))
        assert bounds.width > 0

    def test_binary_rejected(self):
        with pytest.raises(DataError):
            bound_outcome(make_dataset(outcome_type="binary"))

    def test_constant_outcome_rejected(self):
        data = make_dataset()
        flat = TrialDataset(
            covariates=data.covariates,
            treatment=data.treatment,
            outcome=np.full(data.n, 2.5),
            allocation_prob=0.5,
            outcome_type="continuous",
            covariate_names=data.covariate_names,
        )
        with pytest.raises(DataError, match="constant"):
            bound_outcome(flat)

    def test_affine_map_roundtrip(self):
        bounds = OutcomeBounds(-3.0, 7.0)
        y = np.array([-3.0, 2.0, 7.0])
        np.testing.assert_allclose(bounds.from_unit(bounds.to_unit(y)), y, atol=1e-14)
        assert bounds.width == 10.0


class TestMakeFolds:
    def test_every_unit_assigned(self):
        data = make_dataset(n=23)
        folds = make_folds(data, 4, 0)
        assert folds.shape == (23,)
        assert set(folds) == {0, 1, 2, 3}

    def test_arm_stratified_balance(self):
        # within each arm, fold sizes differ by at most one
        data = make_dataset(n=37, seed=9)
        folds = make_folds(data, 5, 1)
        for arm in (0, 1):
            sizes = np.bincount(folds[data.treatment == arm], minlength=5)
            assert sizes.max() - sizes.min() <= 1

    def test_deterministic(self):
        data = make_dataset(n=30)
        np.testing.assert_array_equal(make_folds(data, 3, 42), make_folds(data, 3, 42))

    def test_seed_changes_assignment(self):
        data = make_dataset(n=30)
        assert not np.array_equal(make_folds(data, 3, 0), make_folds(data, 3, 1))

    def test_loo_when_v_equals_n(self):
        data = make_dataset(n=12)
        np.testing.assert_array_equal(make_folds(data, 12, 0), np.arange(12))

    def test_v_out_of_range(self):
        data = make_dataset(n=20)  # 10 per arm
        with pytest.raises(ConfigError):
            make_folds(data, 11, 0)
        with pytest.raises(ConfigError):
            make_folds(data, 1, 0)

    @given(st.integers(min_value=12, max_value=60), st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_fold_sizes_property(self, n, seed):
        data = make_dataset(n=n, seed=seed)
        n1 = int(data.treatment.sum())
        v = min(4, n1, n - n1)
        if v < 2:
            return
        folds = make_folds(data, v, seed)
        for arm in (0, 1):
            sizes = np.bincount(folds[data.treatment == arm], minlength=v)
            assert sizes.max() - sizes.min() <= 1
        assert np.bincount(folds, minlength=v).sum() == n


class TestSubgroup:
    def test_mask_expression(self):
        data = make_dataset(n=50, seed=5)
        mask = subgroup_mask(data, "x0 > 0 & x1 <= 0.5")
        expected = (data.covariates[:, 0] > 0) & (data.covariates[:, 1] <= 0.5)
        np.testing.assert_array_equal(mask, expected)

    def test_subgroup_restricts_and_reweights(self):
        data = make_dataset(n=60, seed=6)
        mask = subgroup_mask(data, "x0 > 0")
        sub = subgroup(data, mask)
        assert sub.n == int(mask.sum())
        assert sub.allocation_prob == pytest.approx(sub.treatment.mean())

    def test_unknown_covariate(self):
        data = make_dataset()
        with pytest.raises(ConfigError, match="unknown covariate"):
            subgroup_mask(data, "zzz > 0")

    def test_unparseable_clause(self):
        data = make_dataset()
        with pytest.raises(ConfigError, match="cannot parse"):
            subgroup_mask(data, "x0 ~ 3")

    def test_empty_subgroup_rejected(self):
        data = make_dataset()
        with pytest.raises(DataError, match="empty"):
            subgroup(data, np.zeros(data.n, dtype=bool))


class TestLoadCsv:
    def _write(self, tmp_path, text):
        path = tmp_path / "trial.csv"
        path.write_text(text)
        return str(path)

    def test_roundtrip(self, tmp_path):
        path = self._write(
            tmp_path,
            "arm,y,age\n1,3.5,50\n0,2.0,61\n1,4.0,45\n0,2.5,58\n",
        )
        data = load_csv(path, CsvSchema(treatment="arm", outcome="y", covariates=("age",)))
        assert data.n == 4
        assert data.outcome_type == "continuous"
        assert data.allocation_prob == 0.5
        np.testing.assert_array_equal(data.treatment, [1, 0, 1, 0])

    def test_binary_auto_detected(self, tmp_path):
        path = self._write(tmp_path, "arm,y\n1,1\n0,0\n1,0\n0,1\n")
        data = load_csv(path, CsvSchema(treatment="arm", outcome="y", covariates=()))
        assert data.outcome_type == "binary"

    def test_missing_column_named(self, tmp_path):
        path = self._write(tmp_path, "arm,y\n1,1\n0,0\n")
        with pytest.raises(DataError, match="'weight'"):
            load_csv(path, CsvSchema(treatment="arm", outcome="y", covariates=("weight",)))

    def test_bad_cell_names_row_and_column(self, tmp_path):
        path = self._write(tmp_path, "arm,y\n1,1\n0,oops\n")
        with pytest.raises(DataError, match=r"row 2.*'y'"):
            load_csv(path, CsvSchema(treatment="arm", outcome="y", covariates=()))

    def test_missing_value_rejected(self, tmp_path):
        path = self._write(tmp_path, "arm,y,age\n1,1,50\n0,0,\n")
        with pytest.raises(DataError, match="missing value"):
            load_csv(path, CsvSchema(treatment="arm", outcome="y", covariates=("age",)))

    def test_non_binary_arm_rejected(self, tmp_path):
        path = self._write(tmp_path, "arm,y\n2,1\n0,0\n")
        with pytest.raises(DataError, match="non-0/1"):
            load_csv(path, CsvSchema(treatment="arm", outcome="y", covariates=()))


def test_arm_means_match_direct_computation():
    data = make_dataset(seed=11)
    treated_mean, control_mean = arm_means(data)
    assert treated_mean == pytest.approx(data.outcome[data.treatment == 1].mean())
    assert control_mean == pytest.approx(data.outcome[data.treatment == 0].mean())
