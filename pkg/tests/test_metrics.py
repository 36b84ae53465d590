import csv

import numpy as np
import pytest

from sanet.errors import ConfigurationError
from sanet.metrics import CLASS_NAMES, aggregate, binary_counts, image_counts, jaccard_dice, macro_average


class TestCounts:
    def test_hand_example(self):
        pred = np.zeros((4, 4), bool)
        gt = np.zeros((4, 4), bool)
        pred[0, :] = True
        gt[0, :2] = gt[1, :2] = True
        assert binary_counts(pred, gt) == (2, 6, 4, 4)

    def test_extent_mismatch(self):
        with pytest.raises(ConfigurationError):
            binary_counts(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_image_counts_shape(self):
        rng = np.random.default_rng(0)
        m = rng.random((5, 6, 6)) < 0.5
        c = image_counts(m, m)
        assert c.shape == (5, 4)
        np.testing.assert_array_equal(c[:, 0], c[:, 1])


class TestJaccardDice:
    def test_example(self):
        ja, di = jaccard_dice((5, 15, 10, 10))
        assert ja == pytest.approx(1 / 3, abs=1e-4) and di == pytest.approx(0.5)

    @pytest.mark.parametrize("value", [1.0, 0.0])
    def test_empty_convention(self, value):
        assert jaccard_dice((0, 0, 0, 0), value) == (value, value)

    def test_dice_relation(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pred, gt = rng.random((8, 8)) < 0.4, rng.random((8, 8)) < 0.4
            ja, di = jaccard_dice(binary_counts(pred, gt))
            assert di == pytest.approx(2 * ja / (1 + ja), rel=1e-12)

    def test_perfect(self):
        m = np.eye(4, dtype=bool)
        assert jaccard_dice(binary_counts(m, m)) == (1.0, 1.0)


class TestAggregate:
    def test_pooling_over_images(self):
        a = np.zeros((5, 4), np.int64)
        b = np.zeros((5, 4), np.int64)
        a[0] = (1, 2, 2, 1)
        b[0] = (3, 4, 3, 4)
        rep = aggregate(np.stack([a, b]))
        assert rep.jaccard[0] == pytest.approx(4 / 6)
        assert rep.jaccard[1:] == (1.0,) * 4
        assert rep.micro_jaccard == pytest.approx(4 / 6)
        assert rep.macro_jaccard == pytest.approx((4 / 6 + 4) / 5)
        assert rep.challenge_jaccard == pytest.approx((4 / 6 + 4 + 4 / 6) / 6)

    def test_zero_convention_lowers_macro(self):
        c = np.zeros((1, 5, 4), np.int64)
        c[0, 0] = (1, 1, 1, 1)
        assert aggregate(c, 1.0).macro_jaccard == 1.0
        assert aggregate(c, 0.0).macro_jaccard == pytest.approx(0.2)

    def test_macro_of_class_values(self):
        ja = (57.6, 34.6, 25.1, 28.6, 24.8)
        c = np.zeros((1, 5, 4), np.int64)
        for k, v in enumerate(ja):
            c[0, k] = (int(round(v * 100)), 10000, 10000, 10000)
        assert 100 * aggregate(c).macro_jaccard == pytest.approx(np.mean(ja), abs=1e-9)
        assert macro_average(ja) == pytest.approx(34.14, abs=0.005)

    def test_bad_shape(self):
        with pytest.raises(ConfigurationError):
            aggregate(np.zeros((2, 4, 4)))
        with pytest.raises(ConfigurationError):
            aggregate(np.zeros((0, 5, 4)))

    def test_csv(self, tmp_path):
        c = np.zeros((1, 5, 4), np.int64)
        c[0, :, :] = (5, 15, 10, 10)
        path = tmp_path / "m.csv"
        aggregate(c).write_csv(path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["class", "jaccard", "dice"]
        assert [r[0] for r in rows[1:]] == list(CLASS_NAMES) + ["macro", "micro", "challenge_avg"]
        assert rows[1][1:] == ["33.33", "50.00"]
