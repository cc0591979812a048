import logging

import numpy as np
import pytest
from PIL import Image

from costvol_ad.data import (
    SCORE_COLUMNS,
    load_image,
    load_mask,
    read_float_map,
    read_scores,
    save_image,
    scan_dataset,
    write_float_map,
    write_scores,
)
from costvol_ad.errors import DatasetError
from costvol_ad.smoke import write_dataset


def png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path


class TestScan:
    def test_smoke_fixture_counts(self, tmp_path):
        root = write_dataset(tmp_path / "ds", n_train=4, size=16)
        index = scan_dataset(root)
        assert index.category_names == ["dots", "stripes"]
        for cat in index.categories.values():
            assert len(cat.train) == 4
            assert len(cat.test) == 24
            assert cat.num_anomalous == 16
            assert not cat.missing_masks
        assert index.validation_report() == []

    def test_empty_root_warns(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            index = scan_dataset(tmp_path)
        assert index.categories == {}
        assert "no categories" in caplog.text

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            scan_dataset(tmp_path / "nope")

    def test_good_only_category(self, tmp_path):
        img = np.zeros((4, 4, 3), np.uint8)
        png(tmp_path / "cat" / "train" / "good" / "a.png", img)
        png(tmp_path / "cat" / "test" / "good" / "b.png", img)
        cat = scan_dataset(tmp_path).categories["cat"]
        assert cat.num_anomalous == 0 and len(cat.test) == 1

    def test_missing_mask_reported(self, tmp_path):
        img = np.zeros((4, 4, 3), np.uint8)
        png(tmp_path / "cat" / "test" / "crack" / "000.png", img)
        png(tmp_path / "cat" / "test" / "crack" / "001.png", img)
        png(tmp_path / "cat" / "ground_truth" / "crack" / "000_mask.png", np.zeros((4, 4), np.uint8))
        index = scan_dataset(tmp_path)
        cat = index.categories["cat"]
        assert [t.mask_path is not None for t in cat.test] == [True, False]
        assert len(index.validation_report()) == 1


class TestImages:
    def test_black_image(self, tmp_path):
        p = png(tmp_path / "b.png", np.zeros((5, 7, 3), np.uint8))
        img = load_image(p, None)
        assert img.shape == (3, 5, 7) and np.all(img == 0.0)

    def test_white_mask(self, tmp_path):
        p = png(tmp_path / "m.png", np.full((6, 6), 255, np.uint8))
        assert np.all(load_mask(p, (12, 12)) == 1)

    def test_constant_resize(self, tmp_path):
        p = png(tmp_path / "c.png", np.full((10, 10, 3), 128, np.uint8))
        img = load_image(p, (32, 32))
        assert img.shape == (3, 32, 32)
        assert np.all(img == 128 / 255)

    def test_mask_resize_stays_binary(self, tmp_path):
        arr = (np.random.default_rng(0).uniform(size=(9, 9)) > 0.5).astype(np.uint8) * 255
        m = load_mask(png(tmp_path / "m.png", arr), (20, 20))
        assert set(np.unique(m)) <= {0, 1}

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(OSError, match="bad.png"):
            load_image(bad)

    def test_save_load_round_trip(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (3, 8, 8)) / 255.0
        save_image(tmp_path / "x.png", img)
        np.testing.assert_allclose(load_image(tmp_path / "x.png", None), img, atol=1e-12)


def test_float_map_round_trip(tmp_path):
    arr = np.random.default_rng(2).uniform(size=(5, 6)).astype(np.float32)
    write_float_map(tmp_path / "a.fmap", arr)
    assert np.array_equal(read_float_map(tmp_path / "a.fmap"), arr)
    raw = (tmp_path / "a.fmap").read_bytes()
    assert raw[:8] == b"CVADFMAP"
    assert np.frombuffer(raw[8:24], "<u4").tolist() == [1, 2, 5, 6]


def test_scores_round_trip(tmp_path):
    rows = [{"image_id": "good/000", "category": "c", "raw_score": 0.25, "fused_score": 0.5,
             "normalized_score": 0.75, "label": 0},
            {"image_id": "x/001", "category": "c", "raw_score": 1.0, "fused_score": 1.0,
             "normalized_score": 1.0, "label": None}]
    write_scores(tmp_path / "s.csv", rows)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == ",".join(SCORE_COLUMNS)
    back = read_scores(tmp_path / "s.csv")
    assert back[0]["raw_score"] == 0.25 and back[0]["label"] == 0
    assert back[1]["label"] is None


def test_scores_missing_column(tmp_path):
    (tmp_path / "s.csv").write_text("image_id,category\na,b\n")
    with pytest.raises(DatasetError):
        read_scores(tmp_path / "s.csv")
