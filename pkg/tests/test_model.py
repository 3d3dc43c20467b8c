import datetime as dt
import math

import numpy as np
import pytest

from stationnet import autodiff as ad
from stationnet import checkpoint as ckpt
from stationnet import model
from stationnet.autodiff import Tensor
from stationnet.model import DemandModel, TrainingConfig
from stationnet.temporal import FeatureScaler

from gradcheck import end_to_end_rel_errors, micro_instance

SMALL = dict(hidden=8, gcn_width=16, head_hidden=16)


def checkpoint_bytes(m, tmp_path, name="m.ckpt"):
    path = tmp_path / name
    m.save(path)
    return path.read_bytes()


class TestHead:
    def test_zero_parameters_predict_ln2(self):
        m = DemandModel(3, FeatureScaler(30.0, np.zeros(4), np.ones(4)), TrainingConfig(**SMALL))
        pred = m.forward(np.zeros((4, 5, 13)), np.ones((4, 5), bool), np.ones((5, 8)), [np.eye(5)] * 3)
        np.testing.assert_allclose(pred.data, np.full((5, 7), math.log(2.0)), rtol=0, atol=1e-15)

    def test_static_width_checked(self):
        m = DemandModel(3, FeatureScaler(30.0, np.zeros(4), np.ones(4)), TrainingConfig(**SMALL))
        with pytest.raises(ValueError, match="width"):
            m.forward(np.zeros((4, 5, 13)), np.ones((4, 5), bool), np.ones((5, 7)), [np.eye(5)] * 3)

    @pytest.mark.parametrize("seed", range(3))
    def test_predictions_are_non_negative(self, seed):
        m, steps, mask, static, gs, _ = micro_instance(seed)
        for t in m.head.tensors():
            t.data = t.data - 5.0
        assert np.all(m.forward(steps, mask, static, gs).data >= 0)


class TestLoss:
    def test_perfect_prediction(self):
        t = np.arange(14.0).reshape(2, 7)
        assert model.loss_expected(Tensor(t), t).item() == 0.0

    def test_unit_offset(self):
        t = np.arange(21.0).reshape(3, 7)
        assert model.loss_expected(Tensor(t + 1.0), t).item() == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.normal(size=(3, 7)), rng.normal(size=(3, 7))
        total = 0.0
        for i in range(3):
            total += sum((p[i][w] - t[i][w]) ** 2 for w in range(7)) / 7
        assert model.loss_expected(Tensor(p), t).item() == pytest.approx(total / 3, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            model.loss_expected(Tensor(np.zeros((2, 7))), np.zeros((3, 7)))

    def test_weights_drop_unsupervised_rows(self):
        p, t = np.zeros((3, 7)), np.ones((3, 7))
        t[1] = 100.0
        w = np.repeat(np.array([[1.0], [0.0], [1.0]]), 7, axis=1) / 7
        assert model.loss_expected(Tensor(p), t, w).item() == pytest.approx(1.0)


class TestEndToEndGradient:
    @pytest.mark.parametrize("seed", range(3))
    def test_all_parameters(self, seed):
        errors = end_to_end_rel_errors(seed)
        assert max(errors.values()) < 1e-4, errors


class TestSamples:
    def test_snapshot_members_alive_then_planned(self, tiny_varied):
        ds = tiny_varied
        as_of = ds.start + dt.timedelta(days=40)
        members = model.snapshot_members(ds.stations, as_of, 28)
        n_alive = sum(s.alive_on(as_of) for s in ds.stations)
        assert all(s.alive_on(as_of) for s in members[:n_alive])
        assert all(as_of < s.deployed_on <= as_of + dt.timedelta(days=28) for s in members[n_alive:])

    def test_planned_stations_have_empty_history(self, tiny_varied):
        ds = tiny_varied
        as_of = ds.start + dt.timedelta(days=40)
        scaler = FeatureScaler.fit(ds.stations)
        s = model.make_sample(ds, scaler, as_of, 28, 56)
        assert s.planned.any()
        assert not s.mask[:, s.planned].any()
        assert s.mask[:, ~s.planned].any(axis=0).all()

    def test_sample_ignores_demand_after_its_window(self, tiny_varied):
        ds = tiny_varied
        as_of = ds.start + dt.timedelta(days=40)
        scaler = FeatureScaler.fit(ds.stations)
        counts = ds.demand_matrix()
        poisoned = counts.copy()
        poisoned[:, ds.day_index(as_of) + 29:] = 999
        a = model.make_sample(ds, scaler, as_of, 28, 56, counts)
        b = model.make_sample(ds, scaler, as_of, 28, 56, poisoned)
        np.testing.assert_array_equal(a.steps, b.steps)
        np.testing.assert_array_equal(a.truth, b.truth)

    def test_training_dates_stop_before_holdout(self, tiny_varied):
        cfg = TrainingConfig(**SMALL)
        dates = model.training_dates(tiny_varied, cfg)
        cutoff = tiny_varied.end - dt.timedelta(days=cfg.holdout_days)
        assert dates[-1] + dt.timedelta(days=cfg.target_window) == cutoff
        assert all(b - a == dt.timedelta(days=7) for a, b in zip(dates, dates[1:]))

    def test_explicit_dates_past_cutoff_rejected(self, tiny_varied):
        cfg = TrainingConfig(snapshot_dates=[tiny_varied.start + dt.timedelta(days=20), tiny_varied.end], **SMALL)
        with pytest.raises(ValueError, match="cutoff"):
            model.training_dates(tiny_varied, cfg)

    def test_config_rejects_short_target_window(self):
        with pytest.raises(ValueError):
            TrainingConfig(target_window=6)


class TestTraining:
    def test_zero_lr_keeps_initialization(self, tiny_varied, tmp_path):
        untouched = model.train(tiny_varied, TrainingConfig(epochs=0, **SMALL)).model
        stepped = model.train(tiny_varied, TrainingConfig(epochs=1, lr=0.0, optimizer="sgd", **SMALL)).model
        a, b = untouched.named_arrays(), stepped.named_arrays()
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k]), k

    def test_loss_non_increasing_at_small_lr(self, tiny_constant):
        res = model.train(tiny_constant, TrainingConfig(epochs=10, lr=1e-3, optimizer="sgd", **SMALL))
        for prev, cur in zip(res.losses[3:], res.losses[4:]):
            assert cur <= prev + 1e-6

    def test_same_seed_same_checkpoint(self, tiny_varied, tmp_path):
        cfg = TrainingConfig(epochs=2, **SMALL)
        a = checkpoint_bytes(model.train(tiny_varied, cfg).model, tmp_path, "a")
        b = checkpoint_bytes(model.train(tiny_varied, cfg).model, tmp_path, "b")
        assert a == b

    def test_different_seed_differs(self, tiny_varied, tmp_path):
        a = checkpoint_bytes(model.train(tiny_varied, TrainingConfig(epochs=1, seed=1, **SMALL)).model, tmp_path, "a")
        b = checkpoint_bytes(model.train(tiny_varied, TrainingConfig(epochs=1, seed=2, **SMALL)).model, tmp_path, "b")
        assert a != b

    def test_divergence_is_reported(self, tiny_varied, monkeypatch):
        real = model.loss_expected
        monkeypatch.setattr(model, "loss_expected", lambda p, t, w=None: real(p, t, w) * float("inf"))
        with pytest.raises(model.TrainingDiverged, match="learning rate"):
            model.train(tiny_varied, TrainingConfig(epochs=1, **SMALL))

    def test_constant_demand_is_learned(self, constant_network):
        cfg = TrainingConfig(epochs=15, lr=0.01, optimizer="sgd", **SMALL)
        res = model.train(constant_network, cfg)
        as_of = constant_network.end - dt.timedelta(days=cfg.holdout_days)
        pred = model.predict_expected(res.model, model.predict_at(res.model, constant_network, as_of, 56))
        assert np.abs(pred - 5.0).max() <= 0.25


class TestCheckpoint:
    def test_crc64_check_value(self):
        assert ckpt.crc64(b"123456789") == 0x995DC9BBDF1939FA

    def test_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi]), "s": np.array(-0.0)}
        ckpt.save(tmp_path / "x", {"k": "v"}, arrays)
        meta, back = ckpt.load(tmp_path / "x")
        assert meta == {"k": "v"}
        for k in arrays:
            assert back[k].tobytes() == arrays[k].astype("<f8").tobytes()

    def test_corruption_detected(self, tmp_path):
        blob = bytearray(ckpt.dumps({}, {"a": np.ones(4)}))
        blob[-3] ^= 0x01
        with pytest.raises(ckpt.CheckpointError, match="checksum"):
            ckpt.loads(bytes(blob))

    def test_truncation_detected(self):
        blob = ckpt.dumps({}, {"a": np.ones(4)})
        with pytest.raises(ckpt.CheckpointError):
            ckpt.loads(blob[:-8])

    def test_model_round_trip(self, tiny_varied, tmp_path):
        m = model.train(tiny_varied, TrainingConfig(epochs=1, **SMALL)).model
        m.save(tmp_path / "m")
        back = DemandModel.load(tmp_path / "m", tiny_varied)
        for k, v in m.named_arrays().items():
            assert np.array_equal(back.named_arrays()[k], v)
        s = model.predict_at(m, tiny_varied, tiny_varied.end - dt.timedelta(days=56), 56)
        np.testing.assert_array_equal(model.predict_expected(m, s), model.predict_expected(back, s))

    def test_poi_mismatch_fails_fast(self, tiny_varied, tiny_constant, tmp_path):
        m = DemandModel(tiny_varied.n_poi + 1, FeatureScaler(30.0, np.zeros(4), np.ones(4)),
                        TrainingConfig(**SMALL), np.random.default_rng(0))
        m.save(tmp_path / "m")
        with pytest.raises(ckpt.CheckpointError, match="POI"):
            DemandModel.load(tmp_path / "m", tiny_varied)
