"""Threshold detector, sweep, and evasion-economics tests."""

from __future__ import annotations

import math

import pytest

from spectreguard.profiles import (
    BENIGN_MD_MEAN,
    STL_ATTACK_MD_MEAN,
    AttackProfile,
    DilutionModel,
)
from spectreguard.threshold import (
    EmptyPopulation,
    ThresholdConfig,
    UnreachableTarget,
    classify_threshold,
    evasion_cost,
    sweep_thresholds,
)
from spectreguard.trace import IntervalAverage, NormalizedMetrics


def make_avg(branch=100.0, md=100.0, worker="w0", window=0):
    return IntervalAverage(
        worker_id=worker,
        window_start_ns=window,
        mean_metrics=NormalizedMetrics(
            branch_instructions=branch,
            branch_misses=1.0,
            cache_references=10.0,
            cache_misses=1.0,
            l1d_read_accesses=100.0,
            l1d_read_misses=5.0,
            mem_disambiguation_resets=md,
        ),
        sample_count=1,
    )


class TestThresholdConfig:
    def test_default_stl_threshold_is_geometric_mean(self):
        cfg = ThresholdConfig()
        assert cfg.stl_reset_threshold == pytest.approx(
            math.sqrt(STL_ATTACK_MD_MEAN * BENIGN_MD_MEAN)
        )
        assert 4800 < cfg.stl_reset_threshold < 4950

    def test_zero_threshold_allowed_for_degraded_mode(self):
        cfg = ThresholdConfig(branch_per_itlb_threshold=0.0)
        assert classify_threshold(make_avg(branch=0.0), cfg).suspect

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            ThresholdConfig(branch_per_itlb_threshold=-1.0)


class TestClassify:
    def test_full_strength_pht_suspect(self):
        verdict = classify_threshold(make_avg(branch=423171.54), ThresholdConfig())
        assert verdict.suspect and verdict.triggering_metric == "branch_per_itlb"

    def test_btb_and_rsb_suspect(self):
        assert classify_threshold(make_avg(branch=23401.20), ThresholdConfig()).suspect
        assert classify_threshold(make_avg(branch=38369.17), ThresholdConfig()).suspect

    def test_stl_caught_by_md_rule(self):
        verdict = classify_threshold(
            make_avg(branch=982.20, md=8993.98), ThresholdConfig()
        )
        assert verdict.suspect
        assert verdict.triggering_metric == "md_reset_per_itlb"
        assert verdict.value == 8993.98

    def test_low_amplification_attack_passes_branch_rule(self):
        verdict = classify_threshold(
            make_avg(branch=3492.41, md=BENIGN_MD_MEAN), ThresholdConfig()
        )
        assert not verdict.suspect

    def test_branch_rule_checked_first(self):
        verdict = classify_threshold(
            make_avg(branch=5000.0, md=9000.0), ThresholdConfig()
        )
        assert verdict.triggering_metric == "branch_per_itlb"

    def test_monotone_in_metric(self):
        cfg = ThresholdConfig()
        low = classify_threshold(make_avg(branch=4000.0), cfg)
        high = classify_threshold(make_avg(branch=4200.0), cfg)
        assert not low.suspect and high.suspect


class TestSweep:
    def test_population_below_min_threshold(self):
        avgs = [make_avg(branch=b) for b in (10.0, 20.0, 30.0)]
        points = sweep_thresholds(avgs, [100.0, 200.0])
        assert [fp for _t, fp in points] == [0.0, 0.0]

    def test_survival_curve_shape(self):
        avgs = [make_avg(branch=float(b)) for b in range(1, 101)]
        points = sweep_thresholds(avgs, [0.5, 25.0, 50.5, 101.0])
        rates = [fp for _t, fp in points]
        assert rates[0] == 1.0  # everything positive sits at/above 0.5
        assert all(b <= a for a, b in zip(rates, rates[1:]))
        assert all(0.0 <= r <= 1.0 for r in rates)
        assert rates[-1] == 0.0

    def test_boundary_is_inclusive(self):
        avgs = [make_avg(branch=4096.0)]
        ((_, fp),) = sweep_thresholds(avgs, [4096.0])
        assert fp == 1.0  # value >= threshold counts as flagged

    def test_empty_population_rejected(self):
        with pytest.raises(EmptyPopulation):
            sweep_thresholds([], [1.0])

    def test_unsorted_thresholds_rejected(self):
        with pytest.raises(ValueError):
            sweep_thresholds([make_avg()], [2.0, 1.0])


class TestEvasion:
    def test_page_inflation_anchor(self):
        cost = evasion_cost(4096.0, AttackProfile.for_variant("pht"))
        assert cost.code_pages == 125
        assert cost.code_bytes == 125 * 4096
        assert cost.code_bytes / 1024 == 500.0  # 500 KB of extra code

    def test_amplification_reduction_leakage(self):
        cost = evasion_cost(4096.0, AttackProfile.for_variant("pht"))
        assert cost.amplification == 11  # largest factor under the threshold
        assert cost.leakage_bits_per_hour <= 1.5

    def test_target_above_unamplified_metric_is_fine(self):
        # 604.71 < 4096, so amplification 1 never triggers UnreachableTarget here
        cost = evasion_cost(700.0, AttackProfile.for_variant("pht"))
        assert cost.amplification == 1

    def test_unreachable_target(self):
        with pytest.raises(UnreachableTarget):
            evasion_cost(500.0, AttackProfile.for_variant("pht"))

    def test_dilution_model_boundaries(self):
        model = DilutionModel()
        full = AttackProfile.for_variant("pht").branch_metric()
        assert model.diluted_metric(full, 125) < 4096.0
        assert model.diluted_metric(full, 124) >= 4096.0

    def test_dilution_cannot_pass_per_page_cost(self):
        model = DilutionModel(branches_per_page=740.0)
        assert model.pages_to_reach(423171.54, 700.0) is None
