import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from costvol_ad.errors import UndefinedMetricError
from costvol_ad.metrics import (
    EvalResult,
    aupro,
    auroc,
    average_precision,
    evaluate_category,
    f1max,
    format_table,
    integrate_curve,
    kde_export,
    mean_result,
    pro_curve,
)

from oracles import ap_rank_walk, aupro_sweep, auroc_pairs, f1max_exhaustive


def random_instance(seed, n=100, ties=True):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 30, n) / 30.0 if ties else rng.uniform(0, 1, n)
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    return scores, labels


def two_region_toy(seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros((16, 16), np.uint8)
    mask[2:5, 2:6] = 1
    mask[9:14, 8:15] = 1
    amap = rng.uniform(0, 0.6, (16, 16))
    amap[mask == 1] += rng.uniform(0.0, 0.5, int(mask.sum()))
    return amap, mask


class TestAUROC:
    def test_perfect_and_inverted(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_pairwise_oracle_exact(self, seed):
        s, y = random_instance(seed)
        assert auroc(s, y) == auroc_pairs(s.tolist(), y.tolist())

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [1, 1])

    def test_random_labels_near_half(self):
        rng = np.random.default_rng(0)
        s = rng.uniform(0, 1, 500)
        values = [auroc(s, rng.permutation(np.r_[np.zeros(250), np.ones(250)])) for _ in range(20)]
        assert abs(np.mean(values) - 0.5) <= 0.05
        assert all(abs(v - 0.5) <= 0.1 for v in values)


class TestAP:
    def test_positives_first(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_single_positive_last(self):
        assert average_precision([5, 4, 3, 2, 1], [0, 0, 0, 0, 1]) == pytest.approx(1 / 5)

    @pytest.mark.parametrize("seed", range(20))
    def test_rank_walk_oracle(self, seed):
        s, y = random_instance(seed)
        assert average_precision(s, y) == pytest.approx(ap_rank_walk(s.tolist(), y.tolist()), abs=1e-12)

    def test_no_positives(self):
        with pytest.raises(UndefinedMetricError):
            average_precision([0.1, 0.2], [0, 0])


class TestF1Max:
    def test_perfect(self):
        assert f1max([0.1, 0.9], [0, 1]) == 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_exhaustive_oracle(self, seed):
        s, y = random_instance(seed)
        assert f1max(s, y) == pytest.approx(f1max_exhaustive(s.tolist(), y.tolist()), abs=1e-12)

    def test_dominates_fixed_threshold(self):
        s, y = random_instance(3, ties=False)
        for t in np.linspace(0, 1, 11):
            pred = s >= t
            tp = np.sum(pred & (y == 1))
            f1 = 2 * tp / (pred.sum() + y.sum())
            assert f1max(s, y) >= f1 - 1e-12


class TestAUPRO:
    def test_perfect_prediction(self):
        _, mask = two_region_toy()
        assert aupro(mask.astype(float), mask) == pytest.approx(1.0, abs=1e-3)

    def test_all_zero_prediction(self):
        _, mask = two_region_toy()
        assert aupro(np.zeros((16, 16)), mask) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("limit", [0.3, 1.0])
    def test_dense_sweep_oracle(self, seed, limit):
        amap, mask = two_region_toy(seed)
        assert aupro(amap, mask, limit) == pytest.approx(aupro_sweep(amap[None], mask[None], limit), abs=1e-6)

    def test_diagonal_pixels_form_one_region(self):
        mask = np.zeros((6, 6), np.uint8)
        mask[1, 1] = mask[2, 2] = 1
        amap = np.zeros((6, 6))
        amap[1, 1] = 1.0
        fpr, pro, _ = pro_curve(amap, mask)
        # one 8-connected region of two pixels: half covered at the top threshold
        assert pro[1] == pytest.approx(0.5)

    def test_region_equal_weight(self):
        mask = np.zeros((10, 10), np.uint8)
        mask[0:5, 0:5] = 1  # big region
        mask[8, 8] = 1  # tiny region
        amap = np.zeros((10, 10))
        amap[8, 8] = 1.0
        _, pro, _ = pro_curve(amap, mask)
        assert pro[1] == pytest.approx(0.5)

    def test_no_regions(self):
        with pytest.raises(UndefinedMetricError):
            aupro(np.random.rand(4, 4), np.zeros((4, 4)))

    def test_trapezoid_mode_between_zero_and_one(self):
        amap, mask = two_region_toy(1)
        v = aupro(amap, mask, mode="trapezoid")
        assert 0.0 <= v <= 1.0

    def test_integrate_step(self):
        assert integrate_curve([0.0, 0.1, 0.5], [0.0, 0.5, 1.0], 0.3) == pytest.approx((0.5 * 0.2) / 0.3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["exp", "cube", "affine", "arctan"]))
def test_monotone_transform_invariance(seed, kind):
    transforms = {
        "exp": np.exp,
        "cube": lambda v: v**3,
        "affine": lambda v: 3.5 * v + 2.0,
        "arctan": lambda v: np.arctan(4 * v - 1),
    }
    f = transforms[kind]
    s, y = random_instance(seed)
    for metric in (auroc, average_precision, f1max):
        assert metric(f(s), y) == pytest.approx(metric(s, y), abs=1e-12)
    amap, mask = two_region_toy(seed % 50)
    assert aupro(f(amap), mask) == pytest.approx(aupro(amap, mask), abs=1e-12)


class TestKDE:
    def test_integrates_to_one(self):
        rng = np.random.default_rng(0)
        s = np.r_[rng.normal(0, 1, 300), rng.normal(3, 0.5, 200)]
        y = np.r_[np.zeros(300), np.ones(200)]
        t = kde_export(s, y)
        assert t["grid"].size == 512
        for k in ("normal", "anomalous"):
            assert np.trapezoid(t[k], t["grid"]) == pytest.approx(1.0, abs=1e-2)

    def test_uniform_weights_do_not_change_curve(self):
        rng = np.random.default_rng(1)
        s, y = rng.uniform(0, 1, 80), np.r_[np.zeros(40), np.ones(40)]
        a = kde_export(s, y)
        b = kde_export(s, y, weights=np.full(80, 2.0))
        np.testing.assert_allclose(a["normal"], b["normal"], rtol=1e-12)
        np.testing.assert_allclose(a["anomalous"], b["anomalous"], rtol=1e-12)

    def test_peak_near_zero(self):
        # a single n=1000 sample moves the KDE mode by ~0.1 on its own, so average over draws
        peaks = []
        for seed in range(20):
            t = kde_export(np.random.default_rng(seed).normal(0, 1, 1000), np.zeros(1000))
            peaks.append(t["grid"][np.argmax(t["normal"])])
        assert abs(np.mean(peaks)) <= 0.1

    def test_small_class_skipped(self):
        t = kde_export([0.1, 0.2, 0.3, 0.9], [0, 0, 0, 1])
        assert "anomalous" not in t and "normal" in t


class TestEvaluate:
    def test_exact_matches_individual_metrics(self):
        amap, mask = two_region_toy(2)
        maps = np.stack([amap, np.random.default_rng(0).uniform(0, 0.6, (16, 16))])
        masks = np.stack([mask, np.zeros_like(mask)])
        r = evaluate_category([0.9, 0.2], [1, 0], maps, masks, max_pixels=None)
        assert r.i_auroc == 1.0
        assert r.p_auroc == auroc(maps, masks)
        assert r.p_aupro == aupro(maps, masks)
        assert all(0.0 <= v <= 1.0 for v in r.as_dict().values())

    def test_subsampling_is_seeded(self):
        amap, mask = two_region_toy(3)
        a = evaluate_category([0.9, 0.1], [1, 0], np.stack([amap, amap]), np.stack([mask, mask * 0]), max_pixels=100)
        b = evaluate_category([0.9, 0.1], [1, 0], np.stack([amap, amap]), np.stack([mask, mask * 0]), max_pixels=100)
        assert a == b

    def test_mean_and_table(self):
        a = EvalResult(*[1.0] * 7)
        b = EvalResult(*[0.5] * 7)
        m = mean_result({"a": a, "b": b})
        assert m.i_auroc == 0.75
        table = format_table({"a": a, "b": b})
        assert "mean" in table and "P-AUPRO" in table and table.count("\n") == 3
