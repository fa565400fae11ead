import numpy as np
import pytest
from numpy.testing import assert_allclose

from skillfuse.trust import (
    PredictionRecord,
    build_trust_spectrum,
    net_trust_score,
    qa_trust,
    trust_density,
)


def rec(true, pred, conf, trial="t0"):
    return PredictionRecord(trial, true, pred, conf)


class TestQaTrust:
    def test_correct_full_confidence(self):
        assert qa_trust(rec(1, 1, 1.0)) == 1.0

    def test_confidently_wrong_is_zero_trust(self):
        assert qa_trust(rec(0, 1, 1.0)) == 0.0

    def test_identity_exponent(self):
        assert qa_trust(rec(1, 1, 0.7)) == 0.7
        assert qa_trust(rec(0, 1, 0.7)) == pytest.approx(0.3)

    def test_exponents_applied(self):
        assert qa_trust(rec(1, 1, 0.5), alpha=2.0) == 0.25
        assert qa_trust(rec(0, 1, 0.5), beta=3.0) == 0.125

    def test_monotone_in_confidence(self):
        confs = np.linspace(0.0, 1.0, 11)
        correct = [qa_trust(rec(1, 1, c)) for c in confs]
        wrong = [qa_trust(rec(0, 1, c)) for c in confs]
        assert np.all(np.diff(correct) > 0)
        assert np.all(np.diff(wrong) < 0)

    def test_record_validation(self):
        with pytest.raises(ValueError):
            rec(0, 1, 1.5)
        with pytest.raises(ValueError):
            rec(-1, 0, 0.5)


class TestTrustDensity:
    def test_point_mass_peaks_at_value(self):
        grid, density = trust_density(np.full(10, 0.9))
        spacing = grid[1] - grid[0]
        assert abs(grid[np.argmax(density)] - 0.9) <= spacing

    @pytest.mark.parametrize("seed", range(4))
    def test_integrates_to_one(self, seed):
        trusts = np.random.default_rng(seed).uniform(0, 1, size=25)
        grid, density = trust_density(trusts)
        assert abs(np.trapezoid(density, grid) - 1.0) <= 1e-3
        assert np.all(density >= 0)

    def test_boundary_heavy_sample_still_normalized(self):
        trusts = np.concatenate([np.full(15, 0.98), np.full(5, 0.02)])
        grid, density = trust_density(trusts)
        assert abs(np.trapezoid(density, grid) - 1.0) <= 1e-3

    def test_bimodal_sample_has_two_maxima(self):
        trusts = np.concatenate([np.full(20, 0.1), np.full(20, 0.9)])
        grid, density = trust_density(trusts)
        # boundary reflection can park a mode on an endpoint, so compare
        # against -inf beyond the interval edges
        padded = np.concatenate([[-np.inf], density, [-np.inf]])
        peaks = np.flatnonzero((padded[1:-1] > padded[:-2])
                               & (padded[1:-1] >= padded[2:]))
        assert peaks.size >= 2
        # one mode in each half of the interval
        assert (grid[peaks] < 0.5).any() and (grid[peaks] > 0.5).any()

    def test_needs_two_values(self):
        with pytest.raises(ValueError):
            trust_density([0.5])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            trust_density([0.5, 1.2])


class TestNetTrustScore:
    def test_simple_mean(self):
        nts = net_trust_score({0: [1.0, 1.0, 0.8]})
        assert_allclose(nts[0], 0.9333333333333333)

    def test_all_correct_full_confidence(self):
        records = [rec(c, c, 1.0, f"t{i}") for i, c in enumerate([0, 1, 0, 1])]
        spectrum = build_trust_spectrum(records)
        assert spectrum.nts == {0: 1.0, 1: 1.0}

    def test_empty_class_missing_not_zero(self):
        nts = net_trust_score({0: [0.5], 1: []})
        assert 1 not in nts
        assert nts[0] == 0.5

    def test_closed_form_identity(self):
        rng = np.random.default_rng(3)
        records = []
        for i in range(40):
            true = int(rng.integers(0, 2))
            pred = int(rng.integers(0, 2))
            conf = float(rng.uniform(0.5, 1.0))
            records.append(rec(true, pred, conf, f"t{i}"))
        spectrum = build_trust_spectrum(records)
        for cls in (0, 1):
            group = [r for r in records if r.true_class == cls]
            expected = (sum(r.confidence for r in group
                            if r.predicted_class == cls)
                        + sum(1 - r.confidence for r in group
                              if r.predicted_class != cls)) / len(group)
            assert abs(spectrum.nts[cls] - expected) < 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        records = [rec(int(rng.integers(0, 2)), int(rng.integers(0, 2)),
                       float(rng.uniform()), f"t{i}") for i in range(20)]
        forward = build_trust_spectrum(records).nts
        backward = build_trust_spectrum(records[::-1]).nts
        assert forward.keys() == backward.keys()
        for cls in forward:  # means agree up to summation order
            assert abs(forward[cls] - backward[cls]) < 1e-12

    def test_nts_in_unit_interval(self):
        rng = np.random.default_rng(5)
        records = [rec(int(rng.integers(0, 3)), int(rng.integers(0, 3)),
                       float(rng.uniform()), f"t{i}") for i in range(60)]
        for value in build_trust_spectrum(records).nts.values():
            assert 0.0 <= value <= 1.0


class TestCorrectOnlyVariant:
    def test_restricts_to_correct_predictions(self):
        records = [rec(0, 0, 0.9, "a"), rec(0, 1, 0.8, "b"),
                   rec(1, 1, 0.6, "c"), rec(1, 1, 0.7, "d")]
        default = build_trust_spectrum(records)
        strict = build_trust_spectrum(records, correct_only=True)
        # class 0 default: mean(0.9, 1-0.8); strict: just 0.9
        assert_allclose(default.nts[0], (0.9 + 0.2) / 2)
        assert strict.nts[0] == 0.9
        assert len(strict.per_class_trusts[0]) == 1
        assert strict.correct_only

    def test_densities_built_per_class(self):
        rng = np.random.default_rng(6)
        records = [rec(i % 2, i % 2, float(rng.uniform(0.6, 1.0)), f"t{i}")
                   for i in range(30)]
        spectrum = build_trust_spectrum(records)
        assert set(spectrum.densities) == {0, 1}
        for density in spectrum.densities.values():
            assert abs(np.trapezoid(density, spectrum.grid) - 1.0) <= 1e-3
