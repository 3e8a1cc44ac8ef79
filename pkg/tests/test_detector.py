import math

import numpy as np
import pytest
import torch

from depa.detector import (BLSTMDetector, DetectorConfig, PatientSequence, Standardizer, detector_forward,
                           fit_standardizer, load_detector, make_prediction, predict, read_predictions,
                           save_detector, train_detector, write_predictions)
from depa.losses import bce_loss, huber_loss, multitask_loss
from depa.metrics import classification_report

LN2 = math.log(2)


def planted(n=8, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y_c = i % 2
        feats = rng.normal(size=(int(rng.integers(2, 6)), dim)) + (2.0 if y_c else -2.0)
        out.append(PatientSequence(f"p{i}", feats, y_c, 15.0 if y_c else 3.0))
    return out


class TestLosses:
    def test_bce_values(self):
        assert float(bce_loss(0.5, 1)) == pytest.approx(LN2, abs=1e-6)
        assert float(bce_loss(1.0, 1)) == pytest.approx(0.0, abs=1e-6)
        for p in np.linspace(0.01, 0.99, 25):
            assert float(bce_loss(p, 1)) == pytest.approx(float(bce_loss(1 - p, 0)), abs=1e-12)

    def test_bce_clamped_at_boundaries(self):
        assert math.isfinite(float(bce_loss(0.0, 1)))
        assert float(bce_loss(0.0, 1)) == pytest.approx(-math.log(1e-7))

    def test_huber_values(self):
        assert float(huber_loss(3.0, 3.0)) == 0.0
        assert float(huber_loss(0.0, 0.5)) == pytest.approx(0.125)
        assert float(huber_loss(0.0, 2.0)) == pytest.approx(1.5)
        assert float(huber_loss(0.0, 1.0)) == pytest.approx(0.5)
        assert float(huber_loss(1.0 - 1e-9, 0.0)) == pytest.approx(0.5, abs=1e-8)

    def test_multitask(self):
        assert float(multitask_loss(0.0, 1, 7.0, 7.0)) == pytest.approx(LN2, abs=1e-6)
        assert float(multitask_loss(20.0, 1, 5.0, 5.0)) <= 1e-6
        assert float(multitask_loss(-20.0, 0, 5.0, 5.0)) <= 1e-6
        rng = np.random.default_rng(0)
        for _ in range(50):
            z, yc, a, b = rng.normal() * 3, int(rng.integers(0, 2)), rng.uniform(0, 24), rng.uniform(0, 24)
            total = float(multitask_loss(z, yc, a, b))
            parts = float(bce_loss(torch.sigmoid(torch.tensor(z, dtype=torch.float64)), yc)) + float(huber_loss(a, b))
            assert total == parts
            assert total >= 0


class TestStandardizer:
    def test_two_value_column(self):
        std = fit_standardizer([PatientSequence("a", [[1.0]]), PatientSequence("b", [[3.0]])])
        assert std.mean.tolist() == [2.0] and std.var.tolist() == [1.0]

    def test_train_pool_standardized(self):
        train = planted(10, dim=6)
        std = fit_standardizer(train)
        z = std.apply(np.concatenate([p.features for p in train]))
        np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-9)
        np.testing.assert_allclose(z.var(axis=0), 1, atol=1e-6)
        again = fit_standardizer([PatientSequence("z", z)])
        np.testing.assert_allclose(again.mean, 0, atol=1e-9)
        np.testing.assert_allclose(again.var, 1, atol=1e-6)

    def test_dev_uses_train_moments(self):
        std = fit_standardizer([PatientSequence("a", [[0.0], [2.0]])])
        assert std.apply(np.array([[101.0]]))[0, 0] == pytest.approx(100 / math.sqrt(1 + 1e-8))

    def test_scaling_invariance(self):
        # exact up to the variance epsilon, so use features whose variance dwarfs it
        rng = np.random.default_rng(3)
        train = [PatientSequence(str(i), rng.normal(5, 30, size=(4, 3))) for i in range(5)]
        scaled = [PatientSequence(p.patient_id, p.features * 7.5) for p in train]
        za = fit_standardizer(train).apply(train[0].features)
        zb = fit_standardizer(scaled).apply(scaled[0].features)
        np.testing.assert_allclose(za, zb, atol=1e-9)

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            fit_standardizer([PatientSequence("a", [[1.0, 2.0]])])

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            Standardizer(np.zeros(2), np.ones(2)).apply(np.zeros((1, 3)))


class TestForward:
    def model(self, seed=0):
        return BLSTMDetector(5, DetectorConfig(layers=2, hidden=8), seed=seed)

    def test_two_outputs_for_any_length(self):
        m = self.model()
        for n in (1, 2, 17):
            out = detector_forward(m, np.random.default_rng(n).normal(size=(n, 5)))
            assert len(out) == 2 and all(math.isfinite(v) for v in out)

    def test_later_responses_matter(self):
        x = np.random.default_rng(0).normal(size=(5, 5))
        for seed in range(5):
            m = self.model(seed)
            assert detector_forward(m, x[:1]) != detector_forward(m, x)

    def test_eval_forward_pure(self):
        m = self.model().train()
        x = np.random.default_rng(1).normal(size=(4, 5))
        first = detector_forward(m, x)
        assert all(detector_forward(m, x) == first for _ in range(100))
        assert m.training  # mode restored

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            detector_forward(self.model(), np.zeros((3, 4)))

    def test_default_shape(self):
        m = BLSTMDetector(256, DetectorConfig())
        assert m.lstm.num_layers == 4 and m.lstm.hidden_size == 128 and m.lstm.bidirectional
        assert m.head.in_features == 256 and m.head.out_features == 2


class TestGradients:
    def test_blstm_matches_finite_differences(self, fd_check):
        cfg = DetectorConfig(layers=1, hidden=4, dropout=0.0)
        model = BLSTMDetector(3, cfg, seed=1).double().train()
        rng = np.random.default_rng(0)
        x = torch.as_tensor(rng.normal(size=(1, 6, 3)))

        def loss():
            out = model(x)[0]
            return multitask_loss(out[0], 1.0, out[1], 0.3)

        errors, skipped = fd_check(loss, model, 150, rng)
        assert skipped == 0 and len(errors) >= 100
        assert errors.max() < 1e-3


class TestTraining:
    def test_overfits_planted_signal(self):
        train = planted(8)
        det = train_detector(train, DetectorConfig(layers=1, hidden=16, epochs=200, seed=0), fit_standardizer(train))
        preds = [predict(det, p).binary for p in train]
        assert classification_report(preds, [p.y_c for p in train]).macro_f1 == 1.0

    def test_trace_reproducible(self):
        train = planted(6)
        cfg = DetectorConfig(layers=2, hidden=8, epochs=4, seed=3)
        a = train_detector(train, cfg, fit_standardizer(train))
        b = train_detector(train, cfg, fit_standardizer(train))
        assert a.loss_trace == b.loss_trace and len(a.loss_trace) == 4

    def test_zero_learning_rate_keeps_parameters(self):
        train = planted(6)
        cfg = DetectorConfig(layers=2, hidden=8, epochs=5, learning_rate=0.0, seed=2)
        det = train_detector(train, cfg, fit_standardizer(train))
        fresh = BLSTMDetector(4, cfg, seed=2)
        for (k, v), (_, w) in zip(det.model.state_dict().items(), fresh.state_dict().items()):
            assert torch.equal(v, w), k

    def test_degenerate_labels(self):
        train = [PatientSequence(str(i), np.ones((2, 3)) * i, 1, 12.0) for i in range(4)]
        with pytest.raises(ValueError, match="degenerate labels"):
            train_detector(train, DetectorConfig(epochs=1), fit_standardizer(train))


class TestPredictions:
    def test_examples(self):
        p = make_prediction(3.0, 10.0)
        assert p.probability == pytest.approx(0.952574, abs=1e-6) and p.binary == 1
        assert make_prediction(0.0, -2.3).phq8_estimate == 0.0
        assert make_prediction(0.0, 30.0).phq8_estimate == 24.0
        half = make_prediction(0.0, 1.0)
        assert half.probability == 0.5 and half.binary == 1
        extreme = make_prediction(-800.0, 1.0)
        assert 0.0 < extreme.probability < 1.0 and extreme.binary == 0

    def test_csv_round_trip(self, tmp_path):
        preds = [make_prediction(1.2, 7.25), make_prediction(-0.4, 30)]
        write_predictions(tmp_path / "p.csv", ["a", "b"], preds)
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "patient_id,probability,binary,phq8_estimate"
        back = read_predictions(tmp_path / "p.csv")
        assert back["b"].binary == 0 and back["b"].phq8_estimate == 24.0

    def test_save_load_equivalent(self, tmp_path):
        train = planted(6)
        det = train_detector(train, DetectorConfig(layers=2, hidden=8, epochs=3), fit_standardizer(train))
        save_detector(det, tmp_path / "d.ckpt")
        assert (tmp_path / "d.ckpt").read_bytes()[8:12] == b"DTCT"
        back = load_detector(tmp_path / "d.ckpt")
        for p in train:
            assert predict(back, p) == predict(det, p)
