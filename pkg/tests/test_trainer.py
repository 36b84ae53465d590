import csv

import numpy as np
import pytest

from sanet.data import Sample, SynthConfig, generate_samples
from sanet.errors import ConfigurationError, TrainingDivergedError
from sanet.model import ToySANet, load_checkpoint
from sanet.tensor import Parameter
from sanet.trainer import (
    LOG_COLUMNS,
    TrainConfig,
    batch_targets,
    evaluate,
    new_model,
    optimizer_step,
    poly_lr,
    predict_masks,
    train,
)

TINY = TrainConfig(epochs=2, batch_size=2, base_channels=4)


@pytest.fixture(scope="module")
def samples():
    return generate_samples(SynthConfig(count=3, height=28, width=28, regions=9, seed=1), threads=1)


class TestPolyLr:
    def test_values(self):
        assert poly_lr(0, 100) == 1e-4
        assert poly_lr(50, 100) == pytest.approx(5.3589e-5, rel=1e-4)
        assert poly_lr(100, 100) == 0.0

    def test_monotone(self):
        lrs = [poly_lr(i, 37) for i in range(38)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ConfigurationError):
            poly_lr(11, 10)


class TestOptimizer:
    def test_first_step_is_sign(self):
        p = Parameter("w", np.zeros(3), decay=False)
        p.grad = np.array([2.0, -0.5, 0.0])
        optimizer_step([p], 0.1, 1, TrainConfig(adam_epsilon=1e-12))
        np.testing.assert_allclose(p.data, [-0.1, 0.1, 0.0], rtol=1e-9)
        np.testing.assert_allclose(p.m1, [0.2, -0.05, 0.0])
        np.testing.assert_allclose(p.m2, [0.004, 0.00025, 0.0])

    def test_decoupled_weight_decay(self):
        w = Parameter("w", np.full(2, 3.0))
        b = Parameter("b", np.full(2, 3.0), decay=False)
        optimizer_step([w, b], 0.5, 1, TrainConfig(weight_decay=0.01))
        np.testing.assert_allclose(w.data, 3.0 - 0.5 * 0.01 * 3.0)
        np.testing.assert_array_equal(b.data, 3.0)

    def test_biases_and_norms_skip_decay(self):
        model = ToySANet(TINY.model_config(28, 28))
        for p in model.parameters():
            assert p.decay == p.name.endswith(".weight"), p.name

    def test_shape_mismatch(self):
        p = Parameter("w", np.zeros(3))
        p.grad = np.zeros(2)
        with pytest.raises(ConfigurationError):
            optimizer_step([p], 0.1, 1)


class TestConfig:
    def test_invalid(self):
        for kwargs in ({"lr": 0}, {"epochs": 0}, {"class_weight_mode": "x"}):
            with pytest.raises(ConfigurationError):
                TrainConfig(**kwargs)

    def test_loss_config(self):
        cfg = TrainConfig(class_weight_mode="inverse_ratio", gamma=2.0)
        assert cfg.loss.gamma == 2.0 and max(cfg.loss.class_weights) > 1


class TestTraining:
    def test_deterministic(self, samples):
        a = train(new_model(TINY, 28, 28), samples, TINY)
        b = train(new_model(TINY, 28, 28), samples, TINY)
        assert a.losses == b.losses
        assert len(a.rows) == 4 and a.step == 4

    def test_outputs(self, samples, tmp_path):
        model = new_model(TINY, 28, 28)
        res = train(model, samples, TINY, val_samples=samples[:2], out_dir=tmp_path)
        rows = list(csv.DictReader((tmp_path / "train_log.csv").open()))
        assert tuple(rows[0]) == LOG_COLUMNS
        assert float(rows[0]["lr"]) == 1e-4 and float(rows[-1]["lr"]) < 1e-4
        assert {p.name for p in tmp_path.glob("*.sanc")} == {"epoch_000.sanc", "epoch_001.sanc", "best.sanc"}
        assert len(list(csv.DictReader((tmp_path / "val_log.csv").open()))) == 2
        assert load_checkpoint(tmp_path / "epoch_001.sanc", new_model(TINY, 28, 28)) == 4
        assert res.final_loss == res.epoch_mean_loss(1)

    def test_parameters_change(self, samples):
        model = new_model(TINY, 28, 28)
        before = [p.data.copy() for p in model.parameters()]
        train(model, samples, TrainConfig(epochs=1, batch_size=3, base_channels=4))
        assert all(not np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))

    def test_diverged_batch(self, samples, tmp_path):
        bad = samples[0]
        img = bad.image.astype(np.float64)
        img[0, 0, 0] = np.inf
        broken = Sample(img, bad.masks, bad.map, "broken")
        cfg = TrainConfig(epochs=1, batch_size=1, base_channels=4, augment=False, shuffle=False)
        with pytest.raises(TrainingDivergedError) as err:
            train(new_model(cfg, 28, 28), [broken], cfg, out_dir=tmp_path)
        assert "broken" in str(err.value)
        assert (tmp_path / "nan_dump.txt").read_text().startswith("non-finite")

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            train(new_model(TINY, 28, 28), [], TINY)


class TestInference:
    def test_predict_and_evaluate(self, samples):
        model = new_model(TINY, 28, 28)
        train(model, samples, TrainConfig(epochs=1, batch_size=3, base_channels=4))
        preds = predict_masks(model, samples, batch_size=2)
        assert len(preds) == 3 and preds[0].shape == (5, 28, 28)
        rep = evaluate(model, samples, batch_size=2)
        assert 0.0 <= rep.micro_jaccard <= 1.0

    def test_targets(self, samples):
        q = batch_targets(samples)
        assert q.shape == (sum(s.map.region_count for s in samples), 5)
        assert set(np.unique(q)) <= {0.0, 1.0}
