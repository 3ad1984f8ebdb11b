"""Data-generating processes, replicate engine, metrics, permutation audit."""

import numpy as np
import pytest
from scipy.special import expit

from adaptive_tmle.data import TrialDataset
from adaptive_tmle.errors import ConfigError
from adaptive_tmle.simlab import (
    DgpSpec,
    EstimateRecord,
    EstimatorDef,
    ReplicateResult,
    SkipReplicate,
    _binary_index,
    _continuous_mean,
    assign_treatment,
    draw_trial,
    gen_counterfactuals,
    gen_covariates,
    permute_treatment,
    run_estimator,
    run_replicates,
    selection_shares,
    summarize_metrics,
    treatment_blind_typeI,
    true_sample_effect,
)
from adaptive_tmle.tmle import Estimand

UNADJ = EstimatorDef(name="unadjusted", kind="unadjusted")
STATIC = EstimatorDef(name="static", kind="static", outcome_covariate=0)


def row(values):
    return np.asarray([values], dtype=float)


class TestBinaryIndex:
    def test_linear_hand_points(self):
        w = row([1.0, 0.0, 0.0, 0.0, 1.0])
        u2 = np.array([0.0])
        # 1 + 1 - 0 + 0 - 0 + 1 - 2 + 0 = 1
        assert _binary_index("linear", 1.0, w, u2)[0] == pytest.approx(1.0)
        assert expit(_binary_index("linear", 1.0, w, u2))[0] == pytest.approx(
            0.7310585786300049, abs=1e-12
        )
        w2 = row([0.0, 1.0, 2.0, 0.5, 3.0])
        u2b = np.array([0.25])
        # 0 - 1 + 2 - 0.5 + 3 + 0.25 = 3.75
        assert _binary_index("linear", 0.0, w2, u2b)[0] == pytest.approx(3.75)

    def test_treatment_only_hand_points(self):
        w = row([5.0, -3.0, 2.0, 0.9, 4.0])  # covariates must not matter
        assert _binary_index("treatment_only", 1.0, w, np.array([0.0]))[0] == pytest.approx(0.1)
        assert _binary_index("treatment_only", 0.0, w, np.array([0.5]))[0] == pytest.approx(1.0)

    def test_interactive_hand_point(self):
        w = row([1.0, 1.0, 1.0, 1.0, 1.0])
        u2 = np.array([0.5])
        # 1 + 5 + 1 + 1 + 1 + 0.5 + 0.5 = 10
        assert _binary_index("interactive", 1.0, w, u2)[0] == pytest.approx(10.0)

    def test_polynomial_hand_points(self):
        w = row([1.0, 0.0, 2.0, 0.5, 2.0])
        u2 = np.array([0.0])
        # 1 + 5.5 - 2 + 2 - 0 + 0 = 6.5
        assert _binary_index("polynomial", 1.0, w, u2)[0] == pytest.approx(6.5)
        wb = row([0.0, 1.0, 1.0, 1.0, 1.0])
        # 4 - 1 + 0.1 = 3.1
        assert _binary_index("polynomial", 0.0, wb, np.array([0.1]))[0] == pytest.approx(3.1)


class TestContinuousMean:
    def test_linear_hand_points(self):
        w0 = row([0.0, 0.0, 0.0, 0.0, 0.0])
        zero = np.array([0.0])
        assert _continuous_mean("linear", 0.0, w0, zero, zero)[0] == pytest.approx(90.0)
        w1 = row([1.0, 1.0, 1.0, 1.0, 1.0])
        got = _continuous_mean("linear", 1.0, w1, np.array([0.5]), np.array([1.0]))[0]
        assert got == pytest.approx(95.62, abs=1e-12)

    def test_interactive_hand_point(self):
        w = row([1.0, 0.0, 2.0, 0.5, 1.0])
        got = _continuous_mean(
            "interactive", 1.0, w, np.array([0.25]), np.array([0.5])
        )[0]
        assert got == pytest.approx(153.405, abs=1e-12)

    def test_treatment_only_hand_points(self):
        w = row([9.0, 9.0, 9.0, 9.0, 9.0])
        u1, u2 = np.array([0.5]), np.array([0.25])
        assert _continuous_mean("treatment_only", 1.0, w, u1, u2)[0] == pytest.approx(91.85)
        assert _continuous_mean("treatment_only", 0.0, w, u1, u2)[0] == pytest.approx(91.75)

    def test_polynomial_hand_points(self):
        w = row([1.0, 1.0, 1.0, 1.0, 1.0])
        zero = np.array([0.0])
        assert _continuous_mean("polynomial", 1.0, w, zero, zero)[0] == pytest.approx(
            91.72, abs=1e-12
        )
        wb = row([0.0, 0.0, 0.0, 1.0, 0.0])
        one = np.array([1.0])
        assert _continuous_mean("polynomial", 0.0, wb, one, one)[0] == pytest.approx(
            96.0175, abs=1e-12
        )


class TestGenCovariates:
    def test_binary_kind_dimensions_and_moments(self):
        spec = DgpSpec("binary", "linear", 5000)
        w, u1, u2 = gen_covariates(spec, 0)
        assert w.shape == (5000, 5)
        assert u1.shape == (5000,) and u2.shape == (5000,)
        assert abs(w.mean()) < 0.05
        assert abs(w.std() - 1.0) < 0.05
        assert 0.0 <= u1.min() and u1.max() <= 1.0

    def test_continuous_kind_covariate_laws(self):
        spec = DgpSpec("continuous", "linear", 5000)
        w, u1, u2 = gen_covariates(spec, 1)
        w1, w2, w3, w4, w5 = (w[:, j] for j in range(5))
        assert set(np.unique(w1)) <= {0.0, 1.0}
        assert abs(w1.mean() - 0.5) < 0.03
        assert set(np.unique(w2)) <= {0.0, 1.0}
        assert np.all(w2 <= w1)
        assert abs(w2.mean() - 0.1) < 0.02
        assert w3.min() >= 0.0 and w3.max() <= 5.0
        assert abs(w3.mean() - 2.5) < 0.1
        assert w4.min() > expit(-2.0) - 1e-12 and w4.max() < expit(2.0) + 1e-12
        assert set(np.unique(w5)) <= {1.0, 2.0, 3.0, 4.0}
        assert abs(w5.mean() - 1.9) < 0.06
        assert u1.max() <= 0.5

    def test_deterministic_and_seed_sensitive(self):
        spec = DgpSpec("binary", "interactive", 200)
        w_a, u1_a, u2_a = gen_covariates(spec, 42)
        w_b, u1_b, u2_b = gen_covariates(spec, 42)
        np.testing.assert_array_equal(w_a, w_b)
        np.testing.assert_array_equal(u1_a, u1_b)
        np.testing.assert_array_equal(u2_a, u2_b)
        w_c, _, _ = gen_covariates(spec, 43)
        assert not np.array_equal(w_a, w_c)

    def test_generator_consumed_in_place(self):
        spec = DgpSpec("binary", "linear", 50)
        rng = np.random.default_rng(7)
        gen_covariates(spec, rng)
        follow = rng.standard_normal()
        rng2 = np.random.default_rng(7)
        gen_covariates(spec, rng2)
        assert follow == rng2.standard_normal()


class TestCounterfactuals:
    def test_binary_outcomes_are_binary(self):
        spec = DgpSpec("binary", "polynomial", 400)
        w, u1, u2 = gen_covariates(spec, 2)
        y1, y0 = gen_counterfactuals(spec, w, u1, u2)
        assert set(np.unique(y1)) <= {0.0, 1.0}
        assert set(np.unique(y0)) <= {0.0, 1.0}

    def test_null_spec_equalizes_arms(self):
        for kind in ("binary", "continuous"):
            spec = DgpSpec(kind, "linear", 300, null_effect=True)
            w, u1, u2 = gen_covariates(spec, 3)
            y1, y0 = gen_counterfactuals(spec, w, u1, u2)
            np.testing.assert_array_equal(y1, y0)

    def test_shared_noise_field(self):
        # the same u1 thresholds both arms, so y1 >= y0 wherever the
        # treated index is larger
        spec = DgpSpec("binary", "treatment_only", 500)
        w, u1, u2 = gen_covariates(spec, 4)
        y1, y0 = gen_counterfactuals(spec, w, u1, u2)
        assert np.all(y1 >= y0)


class TestAssignTreatment:
    def test_simple_fraction_near_half(self):
        spec = DgpSpec("binary", "linear", 5000)
        w, _, _ = gen_covariates(spec, 5)
        a, strata = assign_treatment(spec, w, 6)
        assert strata is None
        assert abs(a.mean() - 0.5) < 0.03

    def test_stratified_exact_balance(self):
        spec = DgpSpec("binary", "linear", 21, design="stratified")
        rng = np.random.default_rng(8)
        w = rng.standard_normal((21, 5))
        w[:10, 0] = np.abs(w[:10, 0]) + 0.1
        w[10:, 0] = -np.abs(w[10:, 0]) - 0.1
        a, strata = assign_treatment(spec, w, 9)
        np.testing.assert_array_equal(strata, (w[:, 0] > 0).astype(int))
        treated_pos = a[:10].sum()
        treated_neg = a[10:].sum()
        assert treated_pos == 5
        assert treated_neg in (5, 6)

    def test_draw_trial_consistency(self):
        spec = DgpSpec("continuous", "interactive", 120, design="stratified")
        rng = np.random.default_rng(10)
        dataset, y1, y0 = draw_trial(spec, rng)
        np.testing.assert_array_equal(
            dataset.outcome, np.where(dataset.treatment == 1, y1, y0)
        )
        assert dataset.strata is not None
        assert dataset.outcome_type == "continuous"
        assert dataset.covariate_names == ("w1", "w2", "w3", "w4", "w5")


class TestTrueSampleEffect:
    def test_difference(self):
        y1 = np.array([1.0, 0.0, 1.0, 1.0])
        y0 = np.array([0.0, 0.0, 1.0, 0.0])
        assert true_sample_effect(y1, y0, Estimand("difference")) == pytest.approx(0.5)

    def test_ratio(self):
        y1 = np.array([1.0, 1.0, 0.0, 0.0])
        y0 = np.array([1.0, 0.0, 0.0, 0.0])
        assert true_sample_effect(y1, y0, Estimand("ratio")) == pytest.approx(2.0)

    def test_zero_control_mean_skips(self):
        y1 = np.ones(4)
        y0 = np.zeros(4)
        with pytest.raises(SkipReplicate):
            true_sample_effect(y1, y0, Estimand("ratio"))

    def test_population_scale_effects_match_formulas(self):
        # large single draws pin the generating formulas, not the estimators
        spec = DgpSpec("binary", "linear", 50000)
        w, u1, u2 = gen_covariates(spec, 11)
        y1, y0 = gen_counterfactuals(spec, w, u1, u2)
        rr = true_sample_effect(y1, y0, Estimand("ratio"))
        assert rr == pytest.approx(1.2314, abs=0.02)

        spec_c = DgpSpec("continuous", "linear", 50000)
        w, u1, u2 = gen_covariates(spec_c, 12)
        y1, y0 = gen_counterfactuals(spec_c, w, u1, u2)
        sate = true_sample_effect(y1, y0, Estimand("difference"))
        assert sate == pytest.approx(0.195, abs=0.01)


class TestDgpSpecValidation:
    def test_bad_fields_rejected(self):
        with pytest.raises(ConfigError):
            DgpSpec("count", "linear", 100)
        with pytest.raises(ConfigError):
            DgpSpec("binary", "quadratic", 100)
        with pytest.raises(ConfigError):
            DgpSpec("binary", "linear", 100, design="cluster")
        with pytest.raises(ConfigError):
            DgpSpec("binary", "linear", 5)


class TestEstimatorDef:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            EstimatorDef(name="x", kind="matching")

    def test_aps_needs_preset_or_candidates(self):
        with pytest.raises(ConfigError):
            EstimatorDef(name="x", kind="aps")
        with pytest.raises(ConfigError):
            EstimatorDef(name="x", kind="aps", preset="huge_trial")

    def test_static_spec_maps_to_univariate(self):
        spec = DgpSpec("binary", "linear", 200)
        rng = np.random.default_rng(13)
        dataset, _, _ = draw_trial(spec, rng)
        fit, ledger = run_estimator(
            EstimatorDef(name="s", kind="static", outcome_covariate=1, ps_covariate=2),
            dataset,
            Estimand("difference"),
            None,
            0,
        )
        assert ledger is None
        assert fit.outcome_spec.kind == "univariate_glm"
        assert fit.outcome_spec.covariate == 1
        assert fit.ps_spec.covariate == 2


class TestRunReplicates:
    def test_unadjusted_matches_arm_contrast_per_draw(self):
        spec = DgpSpec("binary", "linear", 80)
        results = run_replicates(spec, (UNADJ,), Estimand("difference"), 3, base_seed=21)
        assert [r.index for r in results] == [0, 1, 2]
        for res in results:
            rep_seq = np.random.SeedSequence((21, res.index))
            data_seq, _ = rep_seq.spawn(2)
            dataset, y1, y0 = draw_trial(spec, np.random.default_rng(data_seq))
            m1 = dataset.outcome[dataset.treatment == 1].mean()
            m0 = dataset.outcome[dataset.treatment == 0].mean()
            rec = res.records[0]
            assert rec.effect == pytest.approx(m1 - m0, abs=1e-12)
            assert res.truth == pytest.approx(y1.mean() - y0.mean(), abs=1e-15)

    def test_deterministic_rerun(self):
        spec = DgpSpec("continuous", "linear", 60)
        args = (spec, (UNADJ, STATIC), Estimand("difference"), 4)
        run_a = run_replicates(*args, base_seed=22)
        run_b = run_replicates(*args, base_seed=22)
        for res_a, res_b in zip(run_a, run_b):
            assert res_a.truth == res_b.truth
            for rec_a, rec_b in zip(res_a.records, res_b.records):
                assert rec_a == rec_b

    def test_worker_count_invariant(self):
        spec = DgpSpec("binary", "linear", 60)
        serial = run_replicates(spec, (UNADJ,), Estimand("difference"), 4, base_seed=23)
        parallel = run_replicates(
            spec, (UNADJ,), Estimand("difference"), 4, base_seed=23, workers=2
        )
        for res_s, res_p in zip(serial, parallel):
            assert res_s.truth == res_p.truth
            assert res_s.records == res_p.records

    def test_coverage_flag_matches_interval(self):
        spec = DgpSpec("binary", "linear", 100)
        results = run_replicates(spec, (UNADJ,), Estimand("difference"), 2, base_seed=24)
        for res in results:
            rec = res.records[0]
            assert rec.covered == (rec.ci_lower <= res.truth <= rec.ci_upper)


def _fake_results():
    def rec(name, effect, ci, covered, failed=False):
        return EstimateRecord(
            estimator=name,
            effect=effect,
            se=0.1,
            ci_lower=ci[0],
            ci_upper=ci[1],
            variance=0.01,
            p_value=0.5,
            reject=not (ci[0] <= 0.0 <= ci[1]),
            covered=covered,
            selected_outcome="unadjusted",
            selected_ps="unadjusted",
            converged=True,
            failed=failed,
        )

    return [
        ReplicateResult(
            index=0,
            truth=0.2,
            records=[rec("unadjusted", 0.3, (0.1, 0.5), True), rec("aps", 0.25, (-0.1, 0.6), True)],
        ),
        ReplicateResult(
            index=1,
            truth=0.1,
            records=[rec("unadjusted", -0.1, (-0.3, 0.1), True), rec("aps", 0.05, (-0.2, 0.3), True)],
        ),
        ReplicateResult(
            index=2,
            truth=0.3,
            records=[
                rec("unadjusted", 0.5, (0.2, 0.8), True),
                rec("aps", float("nan"), (float("nan"), float("nan")), False, failed=True),
            ],
        ),
    ]


class TestSummarizeMetrics:
    def test_reference_relative_efficiency_is_one(self):
        spec = DgpSpec("binary", "linear", 80)
        results = run_replicates(spec, (UNADJ, STATIC), Estimand("difference"), 6, base_seed=25)
        rows = summarize_metrics(results)
        by_name = {r.estimator: r for r in rows}
        assert by_name["unadjusted"].rel_eff == 1.0
        assert by_name["unadjusted"].savings == 0.0
        ref_mse = by_name["unadjusted"].mse
        assert by_name["static"].rel_eff == pytest.approx(by_name["static"].mse / ref_mse)
        assert by_name["static"].savings == pytest.approx(1.0 - by_name["static"].rel_eff)

    def test_mse_dominates_squared_bias(self):
        spec = DgpSpec("continuous", "interactive", 70)
        results = run_replicates(spec, (UNADJ,), Estimand("difference"), 5, base_seed=26)
        rows = summarize_metrics(results)
        assert rows[0].mse >= rows[0].bias ** 2 - 1e-15

    def test_failed_records_counted_and_excluded(self):
        rows = summarize_metrics(_fake_results())
        by_name = {r.estimator: r for r in rows}
        assert by_name["aps"].n_reps == 2
        assert by_name["aps"].n_failed == 1
        assert by_name["unadjusted"].n_reps == 3
        # aps errors: 0.25-0.2=0.05, 0.05-0.1=-0.05
        assert by_name["aps"].mse == pytest.approx(0.0025)
        assert by_name["aps"].bias == pytest.approx(0.0)

    def test_null_value_override_recomputes_rejections(self):
        results = _fake_results()
        power_default = {r.estimator: r.power for r in summarize_metrics(results)}
        # stored flags test against 0; CIs (0.1,0.5) and (0.2,0.8) exclude it
        assert power_default["unadjusted"] == pytest.approx(2.0 / 3.0)
        power_two = {
            r.estimator: r.power for r in summarize_metrics(results, null_value=2.0)
        }
        assert power_two["unadjusted"] == 1.0
        power_quarter = {
            r.estimator: r.power
            for r in summarize_metrics(results, null_value=0.25)
        }
        assert power_quarter["unadjusted"] == pytest.approx(1.0 / 3.0)

    def test_empty_results(self):
        assert summarize_metrics([]) == []

    def test_mean_truth_reported(self):
        rows = summarize_metrics(_fake_results())
        by_name = {r.estimator: r for r in rows}
        assert by_name["unadjusted"].mean_truth == pytest.approx(0.2)
        assert by_name["aps"].mean_truth == pytest.approx(0.15)


class TestSelectionShares:
    def test_shares_from_fabricated_records(self):
        def rec(selected_outcome, selected_ps, failed=False):
            return EstimateRecord(
                estimator="aps",
                effect=0.1, se=0.1, ci_lower=0.0, ci_upper=0.2,
                variance=0.01, p_value=0.5, reject=False, covered=True,
                selected_outcome=selected_outcome, selected_ps=selected_ps,
                converged=True, failed=failed,
            )

        results = [
            ReplicateResult(0, 0.1, [rec("mars", "unadjusted")]),
            ReplicateResult(1, 0.1, [rec("stepwise", "unadjusted")]),
            ReplicateResult(2, 0.1, [rec("mars", "univariate_glm(w1)")]),
            ReplicateResult(3, 0.1, [rec("", "", failed=True)]),
        ]
        outcome, ps = selection_shares(results, "aps")
        assert outcome == {"mars": 2 / 3, "stepwise": 1 / 3}
        assert ps == {"unadjusted": 2 / 3, "univariate_glm(w1)": 1 / 3}

    def test_unknown_estimator_empty(self):
        assert selection_shares(_fake_results(), "missing") == ({}, {})


class TestPermutation:
    def test_rows_untouched_labels_shuffled(self):
        spec = DgpSpec("binary", "linear", 100)
        dataset, _, _ = draw_trial(spec, np.random.default_rng(30))
        permuted = permute_treatment(dataset, np.random.default_rng(31))
        np.testing.assert_array_equal(permuted.covariates, dataset.covariates)
        np.testing.assert_array_equal(permuted.outcome, dataset.outcome)
        assert permuted.treatment.sum() == dataset.treatment.sum()
        assert not np.array_equal(permuted.treatment, dataset.treatment)

    def test_stratified_permutation_preserves_within_stratum_counts(self):
        spec = DgpSpec("binary", "linear", 120, design="stratified")
        dataset, _, _ = draw_trial(spec, np.random.default_rng(32))
        permuted = permute_treatment(dataset, np.random.default_rng(33))
        for label in np.unique(dataset.strata):
            mask = dataset.strata == label
            assert permuted.treatment[mask].sum() == dataset.treatment[mask].sum()

    def test_audit_requires_hundred_permutations(self):
        spec = DgpSpec("binary", "linear", 60)
        dataset, _, _ = draw_trial(spec, np.random.default_rng(34))
        with pytest.raises(ConfigError):
            treatment_blind_typeI(dataset, (UNADJ,), Estimand("difference"), 99, 0)

    def test_audit_rates_are_counts_over_b(self):
        spec = DgpSpec("binary", "linear", 80)
        dataset, _, _ = draw_trial(spec, np.random.default_rng(35))
        rows = treatment_blind_typeI(dataset, (UNADJ,), Estimand("difference"), 100, 5)
        row = rows[0]
        assert row.b == 100
        assert row.rejection_rate == row.n_reject / 100
        assert row.n_failed == 0
        assert 0.0 <= row.rejection_rate <= 0.2
