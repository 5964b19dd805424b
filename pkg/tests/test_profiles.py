"""Generator calibration tests: benign survival curve, attack anchors, histograms."""

from __future__ import annotations

import numpy as np
import pytest

from spectreguard.profiles import (
    BENIGN_MD_MEAN,
    FULL_AMPLIFICATION,
    METRIC_INTERCEPT,
    METRIC_SLOPE,
    STL_ATTACK_MD_MEAN,
    AttackProfile,
    AttackVariant,
    BenignProfile,
    CalibrationInfeasible,
    DilutionModel,
    generate_attack,
    generate_benign,
    make_attack_histogram,
    make_benign_histogram,
)
from spectreguard.trace import fold_intervals, normalize


def branch_metrics(snapshots):
    return np.array([normalize(s).branch_instructions for s in snapshots])


class TestBenignCalibration:
    def test_survival_matches_targets_analytically(self):
        profile = BenignProfile.default()
        assert profile.survival(1024.0) == pytest.approx(0.2141, abs=0.002)
        assert profile.survival(4096.0) == pytest.approx(0.0061, abs=0.0003)
        assert profile.survival(8192.0) == pytest.approx(0.0026, abs=0.00015)
        assert profile.survival(65536.0) == 0.0

    def test_empirical_quantiles(self):
        profile = BenignProfile.default()
        metrics = branch_metrics(generate_benign(profile, 100_000, seed=2024))
        n = metrics.size
        assert (metrics >= 1024).sum() / n == pytest.approx(0.2141, rel=0.15)
        assert (metrics >= 4096).sum() / n == pytest.approx(0.0061, rel=0.15)
        assert (metrics >= 8192).sum() / n == pytest.approx(0.0026, rel=0.15)
        assert (metrics >= 65536).sum() == 0

    def test_single_snapshot(self):
        (snapshot,) = generate_benign(BenignProfile.default(), 1, seed=0)
        assert snapshot.itlb_accesses > 0

    def test_determinism(self):
        profile = BenignProfile.default()
        assert generate_benign(profile, 50, seed=5) == generate_benign(profile, 50, seed=5)

    def test_inconsistent_targets_rejected(self):
        with pytest.raises(CalibrationInfeasible):
            BenignProfile.calibrate({1024.0: 0.01, 4096.0: 0.5, 8192.0: 0.002, 65536.0: 0.0})

    def test_missing_cutoff_rejected(self):
        with pytest.raises(CalibrationInfeasible):
            BenignProfile.calibrate({1024.0: 0.2, 4096.0: 0.01, 8192.0: 0.002})

    def test_md_metric_sits_near_benign_mean(self):
        snaps = generate_benign(BenignProfile.default(), 4_000, seed=77)
        md = np.array([normalize(s).mem_disambiguation_resets for s in snaps])
        assert md.mean() == pytest.approx(BENIGN_MD_MEAN, rel=0.05)


class TestAttackMetricLaw:
    def test_affine_anchors(self):
        pht = AttackProfile.for_variant("pht")
        assert pht.branch_metric(1) == pytest.approx(604.71, rel=1e-3)
        assert pht.branch_metric(10) == pytest.approx(3492.41, rel=1e-3)
        assert pht.branch_metric() == pytest.approx(423171.54, rel=1e-9)

    def test_variant_means(self):
        assert AttackProfile.for_variant("btb").branch_metric() == pytest.approx(23401.20)
        assert AttackProfile.for_variant("rsb").branch_metric() == pytest.approx(38369.17)
        assert AttackProfile.for_variant("stl").branch_metric() == pytest.approx(982.20)

    def test_full_amplification_consistent_with_law(self):
        derived = (423171.54 - METRIC_INTERCEPT) / METRIC_SLOPE
        assert round(derived) == FULL_AMPLIFICATION

    def test_dilution_anchor(self):
        pht = AttackProfile.for_variant("pht")
        assert pht.branch_metric(pages=125) < 4096.0
        assert DilutionModel().pages_to_reach(pht.branch_metric(), 4096.0) == 125

    def test_md_metric_only_for_stl(self):
        assert AttackProfile.for_variant("stl").md_reset_metric() == pytest.approx(
            STL_ATTACK_MD_MEAN
        )
        assert AttackProfile.for_variant("pht").md_reset_metric() == pytest.approx(
            BENIGN_MD_MEAN
        )


class TestGenerateAttack:
    @pytest.mark.parametrize(
        "variant,target",
        [("pht", 423171.54), ("btb", 23401.20), ("rsb", 38369.17), ("stl", 982.20)],
    )
    def test_full_strength_means(self, variant, target):
        snaps, _hist = generate_attack(variant, n=600, seed=42)
        assert branch_metrics(snaps).mean() == pytest.approx(target, rel=0.05)

    def test_reduced_amplification_means(self):
        snaps1, _ = generate_attack("pht", amplification=1, n=600, seed=43)
        snaps10, _ = generate_attack("pht", amplification=10, n=600, seed=44)
        assert branch_metrics(snaps1).mean() == pytest.approx(604.71, rel=0.05)
        assert branch_metrics(snaps10).mean() == pytest.approx(3492.41, rel=0.05)

    def test_page_dilution_defeats_threshold(self):
        snaps, _ = generate_attack("pht", pages=125, n=600, seed=45)
        assert branch_metrics(snaps).mean() < 4096.0

    def test_stl_md_mean(self):
        snaps, _ = generate_attack("stl", n=600, seed=46)
        md = np.array([normalize(s).mem_disambiguation_resets for s in snaps])
        assert md.mean() == pytest.approx(STL_ATTACK_MD_MEAN, rel=0.05)

    def test_histogram_shape(self):
        _snaps, hist = generate_attack("pht", n=10, seed=47)
        ranked = sorted(hist.entries.values(), reverse=True)
        assert ranked[0] > ranked[1]  # delay loop dominates the mistrained branch
        assert len(hist.entries) > 10

    def test_determinism(self):
        a = generate_attack("pht", n=20, seed=48)
        b = generate_attack("pht", n=20, seed=48)
        assert a[0] == b[0]
        assert a[1].entries == b[1].entries

    def test_snapshots_fold_cleanly(self):
        snaps, _ = generate_attack("pht", n=40, seed=49, samples_per_window=4)
        averages = list(fold_intervals(iter(snaps)))
        assert len(averages) == 10
        assert all(a.sample_count == 4 for a in averages)


class TestHistogramGenerators:
    def test_attack_histogram_counts_positive(self):
        hist = make_attack_histogram(np.random.default_rng(0))
        assert all(c >= 1 for c in hist.entries.values())

    def test_benign_histogram_is_broad(self):
        hist = make_benign_histogram(np.random.default_rng(0))
        assert len(hist.entries) >= 140
        assert min(hist.entries.values()) >= 1
