import math

import numpy as np
import pytest

from bnnrisk.metrics import (
    auroc,
    auroc_by_coverage,
    aupr,
    bce,
    bnn_confidence,
    detection_benchmark,
    max_prob_confidence,
    quantile_loss_ratio,
    risk_coverage,
    uncertainty_shift_test,
)

from conftest import pair_count_auroc, sweep_aupr


class TestBce:
    def test_values(self):
        assert bce(0.1, 1) == pytest.approx(2.3025851, abs=1e-7)
        assert bce(0.1, 0) == pytest.approx(-math.log(0.9), abs=1e-15)
        np.testing.assert_allclose(bce([0.5, 0.5], [0, 1]), [math.log(2)] * 2)

    def test_clipping(self):
        assert bce(0.0, 1) == pytest.approx(-math.log(1e-12))
        assert math.isfinite(bce(1.0, 0))

    def test_labels_checked(self):
        with pytest.raises(ValueError):
            bce(0.2, 2)


class TestAuroc:
    def test_example(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_ties_get_half_credit(self):
        assert auroc([0.5, 0.5], [0, 1]) == 0.5
        assert auroc([1, 1, 0, 1], [1, 0, 0, 1]) == pytest.approx(float(pair_count_auroc([1, 1, 0, 1], [1, 0, 0, 1])))

    def test_matches_pair_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            s = rng.integers(0, 6, n).astype(float)  # many ties
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                continue
            assert auroc(s, y) == float(pair_count_auroc(list(s), list(y)))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            auroc([0.1, 0.2], [1, 1])

    def test_input_checks(self):
        with pytest.raises(ValueError):
            auroc([0.1], [0, 1])
        with pytest.raises(ValueError):
            auroc([np.nan, 0.2], [0, 1])


class TestAupr:
    def test_example(self):
        assert aupr([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
        assert aupr([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(sweep_aupr([0.9, 0.8, 0.7], [1, 0, 1]), abs=1e-12)

    def test_matches_threshold_sweep(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 60))
            s = np.round(rng.random(n), 1)
            y = rng.integers(0, 2, n)
            if y.sum() == 0:
                continue
            assert aupr(s, y) == pytest.approx(sweep_aupr(list(s), list(y)), abs=1e-12)

    def test_negative_class(self):
        s, y = np.array([0.9, 0.8, 0.7, 0.1]), np.array([1, 0, 1, 0])
        assert aupr(s, y, positive_class=0) == pytest.approx(sweep_aupr(list(-s), list(1 - y)), abs=1e-12)

    def test_random_scores_give_prior(self):
        rng = np.random.default_rng(2)
        vals = [aupr(rng.random(2000), (rng.random(2000) < 0.3).astype(int)) for _ in range(40)]
        assert np.mean(vals) == pytest.approx(0.3, abs=0.01)

    def test_perfect(self):
        assert aupr([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_no_positives(self):
        with pytest.raises(ValueError):
            aupr([0.1, 0.2], [0, 0])


class TestRiskCoverage:
    def test_example(self):
        c = risk_coverage([0.1, 0.2, 0.3], [0.01, 0.02, 0.03])
        np.testing.assert_allclose(c.coverage, [1 / 3, 2 / 3, 1.0])
        np.testing.assert_allclose(c.cumulative_loss, [0.1, 0.3, 0.6], atol=1e-15)
        assert c.rows()[0] == {"coverage": pytest.approx(1 / 3), "cumulative_loss": pytest.approx(0.1)}

    def test_sorting_and_ties(self):
        c = risk_coverage([5.0, 1.0, 2.0, 3.0], [0.3, 0.1, 0.1, 0.0])
        assert list(c.order) == [3, 1, 2, 0]
        np.testing.assert_allclose(c.cumulative_loss, [3, 4, 6, 11])

    def test_endpoint_and_monotone(self):
        rng = np.random.default_rng(3)
        loss = rng.exponential(size=5000) * 10 ** rng.uniform(-8, 2, 5000)
        c = risk_coverage(loss, rng.random(5000))
        assert c.total_loss == pytest.approx(math.fsum(loss), abs=1e-12, rel=0)
        assert np.all(np.diff(c.cumulative_loss) >= 0)
        assert np.all(np.diff(c.coverage) > 0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="differ in length"):
            risk_coverage([0.1, 0.2], [0.1])
        with pytest.raises(ValueError):
            risk_coverage([], [])

    def test_quantile_ratio(self):
        losses = np.r_[np.full(5, 0.1), np.full(10, 0.5), np.full(5, 2.0)]
        c = risk_coverage(losses, np.arange(20))
        assert quantile_loss_ratio(c, 0.25) == pytest.approx(20.0)
        assert quantile_loss_ratio(c, 0.2) == pytest.approx(8.0 / 0.4)
        with pytest.raises(ValueError):
            quantile_loss_ratio(c, 0.6)

    def test_uncorrelated_losses_give_ratio_near_one(self):
        rng = np.random.default_rng(4)
        c = risk_coverage(rng.exponential(size=50_000), rng.random(50_000))
        assert quantile_loss_ratio(c) == pytest.approx(1.0, abs=0.05)

    def test_auroc_by_coverage(self):
        s = np.array([0.9, 0.1, 0.8, 0.2, 0.6, 0.4])
        y = np.array([1, 0, 1, 0, 0, 1])
        u = np.array([0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
        vals = auroc_by_coverage(s, y, u, [1 / 3, 2 / 3, 1.0])
        assert vals[0] == 1.0 and vals[1] == 1.0
        assert vals[2] == pytest.approx(auroc(s, y))
        assert math.isnan(auroc_by_coverage(s, y, u, [1 / 6])[0])
        curve = risk_coverage(bce(s, y), u, labels=y, scores=s, auroc_grid=[0.5, 1.0])
        np.testing.assert_allclose(curve.auroc_values, auroc_by_coverage(s, y, u, [0.5, 1.0]))


class TestDetection:
    def test_confidences(self):
        np.testing.assert_array_equal(bnn_confidence([0.1, 0.0]), [-0.1, -0.0])
        np.testing.assert_array_equal(max_prob_confidence([0.2, 0.5, 0.9]), [0.8, 0.5, 0.9])

    def test_report(self):
        conf = {"a": np.array([0.9, 0.8, 0.7, 0.1]), "b": np.array([0.1, 0.2, 0.3, 0.4])}
        cond = np.array([1, 1, 0, 0])
        rep = detection_benchmark(conf, cond, task="ood-detection")
        assert rep.columns == ("auroc", "aupr_in", "aupr_out")
        assert rep.rows["a"]["auroc"] == 1.0 and rep.rows["b"]["auroc"] == 0.0
        assert set(rep.to_dict()["methods"]) == {"a", "b"}
        err = detection_benchmark(conf, {"a": cond, "b": 1 - cond})
        assert err.columns == ("auroc", "aupr_success", "aupr_error")
        assert err.rows["b"]["auroc"] == 1.0

    def test_single_class_condition(self):
        with pytest.raises(ValueError, match="single class"):
            detection_benchmark({"a": [0.1, 0.2]}, [1, 1])
        with pytest.raises(ValueError):
            detection_benchmark({"a": [0.1, 0.2]}, [1, 0], task="other")


def test_uncertainty_shift():
    rng = np.random.default_rng(5)
    res = uncertainty_shift_test(rng.exponential(3.0, 400), rng.exponential(1.0, 400))
    assert res["ratio"] == pytest.approx(3.0, rel=0.2)
    assert res["p_value"] < 1e-10
    same = uncertainty_shift_test(rng.exponential(1.0, 400), rng.exponential(1.0, 400))
    assert same["p_value"] > 1e-3
    with pytest.raises(ValueError):
        uncertainty_shift_test([], [1.0])
