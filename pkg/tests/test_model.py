import numpy as np
import pytest

from softfree import autograd as ag
from softfree.errors import DomainError, NumericError, ShapeError
from softfree.kernel import TokenSequence
from softfree.model import (
    SoftLayerParams,
    ToyModel,
    ToyModelConfig,
    TrainReport,
    load_params,
    logistic_baseline,
    make_synthetic_task,
    save_params,
    soft_layer_forward,
    train,
)

SMALL = dict(grid_h=4, grid_w=4, d_e=16, heads=2, layers=1, m=4, input_dim=8, expansion=2)


def small_setup(samples_per_class=16, **kw):
    cfg = ToyModelConfig(**{**SMALL, **kw})
    return cfg, make_synthetic_task(cfg, samples_per_class=samples_per_class)


class TestLayer:
    def test_residual_identity(self):
        rng = np.random.default_rng(0)
        cfg = ToyModelConfig(**SMALL).attention_config()
        p = SoftLayerParams.init(16, rng)
        p.w_out[:] = 0.0
        p.ffn_w2[:] = 0.0
        x = TokenSequence(rng.standard_normal((16, 16)), 4, 4)
        assert np.array_equal(soft_layer_forward(x, p, cfg).features, x.features)

    def test_single_token(self):
        rng = np.random.default_rng(1)
        cfg = ToyModelConfig(grid_h=1, grid_w=1, d_e=8, heads=1, layers=1, m=1).attention_config()
        x = TokenSequence(rng.standard_normal((1, 8)), 1, 1)
        out = soft_layer_forward(x, SoftLayerParams.init(8, rng), cfg)
        assert out.features.shape == (1, 8) and np.isfinite(out.features).all()

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        cfg = ToyModelConfig(**SMALL).attention_config()
        x = TokenSequence(rng.standard_normal((16, 16)), 4, 4)
        outs = [soft_layer_forward(x, SoftLayerParams.init(16, np.random.default_rng(3)), cfg).features
                for _ in range(2)]
        assert np.array_equal(*outs)

    def test_width_mismatch(self):
        cfg = ToyModelConfig(**SMALL).attention_config()
        with pytest.raises(ShapeError):
            soft_layer_forward(TokenSequence(np.zeros((16, 8)), 4, 4),
                               SoftLayerParams.init(16, np.random.default_rng(0)), cfg)


class TestModel:
    def test_config_validation(self):
        with pytest.raises(DomainError):
            ToyModelConfig(classes=1)
        with pytest.raises(ShapeError):
            ToyModelConfig(m=8)  # not reachable by pooling an 8x8 grid

    def test_forward_shape_and_layer_view(self):
        cfg, task = small_setup()
        model = ToyModel.init(cfg)
        assert model.forward(task.x_test[:5]).shape == (5, cfg.classes)
        assert model.layer_params(0).w_qk.shape == (16, 16)
        with pytest.raises(ShapeError):
            model.forward(task.x_test[:5, :8])

    def test_conv_model_has_kernel(self):
        model = ToyModel.init(ToyModelConfig(**SMALL, sampler="conv"))
        assert model.params["layer0.conv"].shape == (4 * 16, 16)

    def test_save_load_roundtrip(self, tmp_path):
        cfg, task = small_setup()
        model = ToyModel.init(cfg)
        model.save(tmp_path / "p.bin")
        other = ToyModel.init(ToyModelConfig(**{**SMALL, "seed": 9})).load(tmp_path / "p.bin")
        assert np.array_equal(model.forward(task.x_test).value, other.forward(task.x_test).value)

    def test_load_rejects_other_shapes(self, tmp_path):
        ToyModel.init(ToyModelConfig(**SMALL)).save(tmp_path / "p.bin")
        with pytest.raises(ShapeError):
            ToyModel.init(ToyModelConfig(**{**SMALL, "layers": 2})).load(tmp_path / "p.bin")


class TestParamFile:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        params = {"a": rng.standard_normal((3, 2)), "b": np.array(1.5), "c.d": rng.standard_normal(7)}
        save_params(tmp_path / "p.bin", params)
        back = load_params(tmp_path / "p.bin")
        assert set(back) == set(params)
        for k in params:
            assert np.array_equal(back[k], params[k]) and back[k].shape == params[k].shape

    def test_truncated(self, tmp_path):
        save_params(tmp_path / "p.bin", {"a": np.ones((4, 4))})
        raw = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[:-5])
        with pytest.raises(ValueError):
            load_params(tmp_path / "t.bin")
        (tmp_path / "x.bin").write_bytes(raw + b"\0")
        with pytest.raises(ValueError):
            load_params(tmp_path / "x.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "p.bin").write_bytes(b"NOTPARAMS" + bytes(16))
        with pytest.raises(ValueError):
            load_params(tmp_path / "p.bin")


class TestTask:
    def test_split_sizes(self):
        task = make_synthetic_task(ToyModelConfig())
        assert task.x_train.shape == (512, 64, 16) and task.x_test.shape == (256, 64, 16)
        assert np.bincount(np.r_[task.y_train, task.y_test]).tolist() == [192] * 4

    def test_seeded(self):
        cfg = ToyModelConfig(**SMALL)
        a, b = make_synthetic_task(cfg, 8, seed=3), make_synthetic_task(cfg, 8, seed=3)
        assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)

    def test_last_placement(self):
        task = make_synthetic_task(ToyModelConfig(**SMALL), 8, placement="last")
        assert task.signal_mask[:, -4:].all() and not task.signal_mask[:, :-4].any()

    def test_noiseless_is_separable(self):
        task = make_synthetic_task(ToyModelConfig(), 32, sigma=0.0)
        assert logistic_baseline(task) == 1.0

    def test_identical_means_is_chance(self):
        cfg = ToyModelConfig()
        task = make_synthetic_task(cfg, 96, means=np.tile(np.eye(1, 16), (4, 1)))
        assert abs(logistic_baseline(task) - 1 / cfg.classes) <= 0.12

    def test_default_baseline_learnable(self):
        assert logistic_baseline(make_synthetic_task(ToyModelConfig())) >= 0.8


class TestTrain:
    def test_zero_lr_constant_loss(self):
        cfg, task = small_setup()
        report = train(ToyModel.init(cfg), task, epochs=3, lr=0.0)
        assert np.ptp(report.epoch_losses) <= 1e-12

    def test_same_seed_same_curve(self):
        curves = []
        for _ in range(2):
            cfg, task = small_setup()
            curves.append(train(ToyModel.init(cfg), task, epochs=3, seed=5).epoch_losses)
        assert curves[0] == curves[1]

    def test_loss_goes_down(self):
        cfg, task = small_setup(samples_per_class=24)
        losses = train(ToyModel.init(cfg), task, epochs=12, lr=3e-3).epoch_losses
        slope = np.polyfit(np.arange(len(losses)), losses, 1)[0]
        assert slope < 0

    def test_report_json_roundtrip(self):
        cfg, task = small_setup()
        report = train(ToyModel.init(cfg), task, epochs=2)
        back = TrainReport.from_json(report.to_json())
        assert back == report
        assert 0 < report.max_norm_ratio < 100

    def test_nan_names_epoch(self, monkeypatch):
        cfg, task = small_setup()
        calls = {"n": 0}
        real = ag.cross_entropy_with_logits

        def poisoned(logits, labels):
            calls["n"] += 1
            out = real(logits, labels)
            if calls["n"] > 2:  # batches per epoch = 2, so epoch 2 goes bad
                out.value = np.array(np.nan)
            return out

        monkeypatch.setattr(ag, "cross_entropy_with_logits", poisoned)
        with pytest.raises(NumericError, match="epoch 2"):
            train(ToyModel.init(cfg), task, epochs=3)

    def test_rejects_non_finite_data(self):
        cfg, task = small_setup()
        task.x_train[0, 0, 0] = np.inf
        with pytest.raises(DomainError):
            train(ToyModel.init(cfg), task, epochs=1)

    def test_report_rejects_nan(self):
        with pytest.raises(NumericError):
            TrainReport(epoch_losses=[1.0, float("nan")])
