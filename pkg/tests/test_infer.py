import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from costvol_ad.errors import ConfigError
from costvol_ad.infer import fuse, image_score, normalize_per_category
from costvol_ad.metrics import auroc


class TestFuse:
    def test_endpoints_bit_exact(self):
        rng = np.random.default_rng(0)
        m, b = rng.uniform(0, 1, (8, 8)), rng.uniform(0, 1, (8, 8))
        assert fuse(m, b, 1.0).tobytes() == m.tobytes()
        assert fuse(m, b, 0.0).tobytes() == b.tobytes()

    def test_midpoint(self):
        out = fuse(np.full((4, 4), 0.2), np.full((4, 4), 0.6), 0.5)
        np.testing.assert_allclose(out, 0.4, atol=1e-15)

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_out_of_range(self, lam):
        with pytest.raises(ConfigError):
            fuse(np.zeros((2, 2)), np.zeros((2, 2)), lam)

    def test_baseline_resized(self):
        out = fuse(np.zeros((8, 8)), np.ones((4, 4)), 0.5)
        assert out.shape == (8, 8)
        np.testing.assert_allclose(out, 0.5)


class TestImageScore:
    def test_single_hot(self):
        m = np.zeros((16, 16))
        m[3, 4] = 1.0
        assert image_score(m) == 1 / 250

    def test_constant(self):
        assert image_score(np.full((20, 20), 0.37)) == pytest.approx(0.37, abs=1e-15)

    def test_sort_oracle(self):
        m = np.random.default_rng(1).uniform(0, 1, 300)
        assert image_score(m) == pytest.approx(np.sort(m)[::-1][:250].mean(), abs=1e-15)

    def test_small_map_averages_all(self):
        m = np.arange(10.0)
        assert image_score(m) == 4.5

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 300, elements=st.floats(0, 1)), st.integers(0, 299), st.floats(0, 1))
    def test_monotone(self, m, idx, bump):
        raised = m.copy()
        raised[idx] += bump
        assert image_score(raised) >= image_score(m)


class TestNormalize:
    def test_constant_map_to_zeros(self):
        out, scores = normalize_per_category([np.full((4, 4), 0.3)])
        assert np.all(out[0] == 0.0) and scores == [0.0]

    def test_extremes_and_auroc(self):
        rng = np.random.default_rng(2)
        maps = [rng.uniform(-3, 5, (8, 8)) for _ in range(5)]
        out, _ = normalize_per_category(maps)
        assert min(m.min() for m in out) == 0.0 and max(m.max() for m in out) == 1.0
        labels = rng.integers(0, 2, (5, 8, 8))
        labels[0, 0, 0], labels[0, 0, 1] = 0, 1
        assert auroc(np.stack(out), labels) == auroc(np.stack(maps), labels)

    def test_preserves_image_score_ranking(self):
        rng = np.random.default_rng(3)
        maps = [rng.uniform(0, 1, (20, 20)) ** (k + 1) for k in range(6)]
        _, scores = normalize_per_category(maps)
        raw = [image_score(m) for m in maps]
        assert np.array_equal(np.argsort(scores), np.argsort(raw))
