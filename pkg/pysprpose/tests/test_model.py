import numpy as np
import pytest

from pysprpose.encoder import VANILLA, ConfidenceMap, DisplacementMapStack, EncoderConfig
from pysprpose.errors import DataError, TensorFormatError, TrainingDiverged
from pysprpose.evaluation import mean_ap
from pysprpose.loss import LossConfig, total_loss
from pysprpose.model import (
    ToyRegressor, TrainConfig, Trainer, backward, build_training_set, conv3x3, conv3x3_backward, forward,
    gradient_check, load_checkpoint, predict, save_checkpoint, train_toy,
)
from pysprpose.skeleton import default_toy6
from pysprpose.synth import SynthConfig, generate_dataset


def _samples(count=2, size=24, seed=0):
    cfg = SynthConfig(seed=seed, min_persons=1, max_persons=1, image_height=size, image_width=size,
                      limb_lengths=((2.0, 3.0), (2.0, 3.0), (2.0, 3.0)), sigma=2.0)
    return generate_dataset(cfg, count)


def _dataset(count=2, size=24, seed=0):
    samples = _samples(count, size, seed)
    return build_training_set(samples, default_toy6(), VANILLA, EncoderConfig.for_image(size, size, tau=2.0)), samples


class TestConvolution:

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 6, 2))
        w = rng.normal(size=(2, 3, 3, 4))
        b = rng.normal(size=4)
        out, _ = conv3x3(x, w, b)
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        expected = np.zeros((5, 6, 4))
        for i in range(5):
            for j in range(6):
                expected[i, j] = np.einsum("hwc,chwo->o", xp[i:i + 3, j:j + 3], w) + b
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 4, 2))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=3)
        upstream = rng.normal(size=(4, 4, 3))
        out, cols = conv3x3(x, w, b)
        dx, dw, db = conv3x3_backward(upstream, cols, w, x.shape)
        h = 1e-6
        for idx in [(0, 0, 0), (1, 2, 1), (3, 3, 1)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            numeric = (np.sum(conv3x3(xp, w, b)[0] * upstream) - np.sum(conv3x3(xm, w, b)[0] * upstream)) / (2 * h)
            assert dx[idx] == pytest.approx(numeric, rel=1e-6, abs=1e-8)
        np.testing.assert_allclose(db, upstream.reshape(-1, 3).sum(axis=0))
        assert dw.shape == w.shape


class TestRegressor:

    def test_output_shapes(self):
        model = ToyRegressor(num_joints=6, stages=2)
        outputs, _ = model.forward(np.zeros((12, 10, 3)))
        assert len(outputs) == 2
        conf, disp = outputs[-1]
        assert conf.shape == (12, 10)
        assert disp.shape == (12, 10, 12)

    def test_zero_weights_give_half_confidence(self):
        model = ToyRegressor(num_joints=6, init="zeros")
        maps = forward(model, np.random.default_rng(0).uniform(size=(8, 8, 3)))
        for cmap, dstack in maps:
            np.testing.assert_allclose(cmap.values, 0.5)
            assert not dstack.values.any()

    def test_only_2d_is_supported(self):
        with pytest.raises(ValueError):
            ToyRegressor(num_joints=15, dim=3)

    def test_rejects_non_rgb_input(self):
        with pytest.raises(DataError):
            ToyRegressor(num_joints=2).forward(np.zeros((4, 4)))

    def test_seeded_initialization_is_reproducible(self):
        a, b = ToyRegressor(num_joints=3, seed=4), ToyRegressor(num_joints=3, seed=4)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        c = ToyRegressor(num_joints=3, seed=5)
        assert not np.array_equal(a.params["stage0.conv0.w"], c.params["stage0.conv0.w"])

    def test_parameter_names(self):
        model = ToyRegressor(num_joints=2, stages=2)
        assert "stage1.conv0.w" in model.params
        # later stages read the image plus the previous stage's features
        assert model.params["stage1.conv0.w"].shape == (3 + 32, 3, 3, 16)
        assert model.params["stage0.disp.w"].shape == (32, 4)

    def test_backward_function_matches_method(self):
        model = ToyRegressor(num_joints=2, stages=1, widths=(4, 4, 4))
        image = np.random.default_rng(2).uniform(size=(6, 6, 3))
        outputs, cache = model.forward(image)
        grads = [(np.ones_like(c), np.ones_like(d)) for c, d in outputs]
        a = model.backward(cache, grads)
        b = backward(model, image, grads)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_stage_gradient_count_is_checked(self):
        model = ToyRegressor(num_joints=2, stages=2, widths=(4, 4, 4))
        outputs, cache = model.forward(np.zeros((4, 4, 3)))
        with pytest.raises(DataError):
            model.backward(cache, [(np.zeros((4, 4)), np.zeros((4, 4, 4)))])


class TestGradientCheck:

    def test_analytic_gradients_agree(self):
        data, _ = _dataset(count=1, size=16)
        image, targets = data[0]
        model = ToyRegressor(num_joints=6, stages=2, widths=(4, 6, 6), seed=3)
        result = gradient_check(model, image, targets, samples=60, seed=1, floor=1e-6)
        assert result.checked >= 30
        assert result.max_relative_error < 1e-4

    def test_small_single_stage_model_with_random_targets(self):
        rng = np.random.default_rng(21)
        image = rng.uniform(size=(8, 8, 3))
        contributors = (rng.uniform(size=(8, 8, 2)) < 0.6).astype(np.int32)
        targets = (ConfidenceMap(rng.uniform(size=(8, 8))),
                   DisplacementMapStack(values=rng.normal(scale=0.2, size=(8, 8, 4)), contributors=contributors, dim=2))
        model = ToyRegressor(num_joints=2, stages=1, widths=(4, 4, 4), seed=8)
        result = gradient_check(model, image, targets, samples=50, seed=3, floor=1e-6)
        assert result.checked + result.skipped == 50
        assert result.max_relative_error < 1e-4

    def test_zero_loss_gradient_gives_zero_parameter_gradients(self):
        model = ToyRegressor(num_joints=2, stages=2, widths=(4, 4, 4), seed=1)
        outputs, cache = model.forward(np.random.default_rng(0).uniform(size=(6, 6, 3)))
        grads = model.backward(cache, [(np.zeros_like(c), np.zeros_like(d)) for c, d in outputs])
        assert not any(g.any() for g in grads.values())

    def test_intermediate_supervision_reaches_first_stage(self):
        data, _ = _dataset(count=1, size=16)
        image, targets = data[0]
        model = ToyRegressor(num_joints=6, stages=2, widths=(4, 4, 4), seed=0).astype(np.float64)
        outputs, cache = model.forward(image)
        _, stage_grads = total_loss(outputs, targets, stage_weights=(1.0, 0.0))
        grads = model.backward(cache, stage_grads)
        assert np.abs(grads["stage0.conf.w"]).sum() > 0
        assert not grads["stage1.conf.w"].any()
        assert not grads["stage1.conv0.w"].any()

    def test_weighted_stages_check(self):
        data, _ = _dataset(count=1, size=16)
        image, targets = data[0]
        model = ToyRegressor(num_joints=6, stages=2, widths=(4, 4, 4), seed=6)
        result = gradient_check(model, image, targets, samples=40, seed=2, floor=1e-6, stage_weights=(1.0, 0.5))
        assert result.max_relative_error < 1e-4


class TestTraining:

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(decay_factor=0.0)

    def test_learning_rate_schedule(self):
        cfg = TrainConfig(learning_rate=0.01, milestones=(10, 5), decay_factor=0.1)
        assert cfg.milestones == (5, 10)
        assert cfg.learning_rate_at(0) == 0.01
        assert cfg.learning_rate_at(5) == pytest.approx(0.001)
        assert cfg.learning_rate_at(12) == pytest.approx(0.0001)

    def test_zero_learning_rate_keeps_loss_constant(self):
        data, _ = _dataset()
        model = ToyRegressor(num_joints=6, widths=(4, 4, 4), seed=1)
        before = {n: p.copy() for n, p in model.params.items()}
        _, history = train_toy(model, data, TrainConfig(learning_rate=0.0, epochs=3))
        assert len(history) == 3
        assert history[0] == history[1] == history[2]
        for name, value in model.params.items():
            np.testing.assert_array_equal(value, before[name])

    def test_loss_decreases(self):
        data, _ = _dataset()
        model = ToyRegressor(num_joints=6, widths=(8, 8, 8), seed=2)
        _, history = train_toy(model, data, TrainConfig(learning_rate=0.003, epochs=10))
        assert history[-1] < history[0]

    def test_training_is_deterministic(self):
        data, _ = _dataset()
        runs = []
        for _ in range(2):
            model = ToyRegressor(num_joints=6, widths=(4, 4, 4), seed=7)
            runs.append(train_toy(model, data, TrainConfig(epochs=3, seed=9))[1])
        assert runs[0] == runs[1]

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            Trainer(ToyRegressor(num_joints=6)).fit([])

    def test_divergence_is_reported(self):
        data, _ = _dataset(count=1)
        model = ToyRegressor(num_joints=6, widths=(4, 4, 4))
        model.params["stage0.disp.b"][:] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train_toy(model, data, TrainConfig(epochs=2))
        assert info.value.epoch == 0

    def test_predict_returns_decoded_poses(self):
        data, samples = _dataset(count=1)
        model = ToyRegressor(num_joints=6, widths=(4, 4, 4))
        enc = EncoderConfig.for_image(24, 24, tau=2.0)
        poses = predict(model, data[0][0], enc, default_toy6(), VANILLA)
        assert isinstance(poses, list)
        report = mean_ap([poses], [list(samples[0][0].persons)], default_toy6(),
                         [list(samples[0][0].reference_lengths)])
        assert report.total_map is None or 0.0 <= report.total_map <= 1.0


@pytest.mark.slow
def test_toy_model_fits_its_training_scenes():
    samples = generate_dataset(SynthConfig(seed=0, min_persons=1, max_persons=2, image_height=64, image_width=64), 5)
    spec = default_toy6()
    enc = EncoderConfig.for_image(64, 64)
    data = build_training_set(samples, spec, VANILLA, enc)
    model = ToyRegressor(num_joints=6)
    train_toy(model, data, TrainConfig(epochs=500, loss=LossConfig(beta=0.01)))
    preds = [predict(model, image, enc, spec, VANILLA) for image, _ in data]
    report = mean_ap(preds, [list(s.persons) for s, _ in samples], spec,
                     [list(s.reference_lengths) for s, _ in samples])
    assert report.total_pck == 1.0


class TestCheckpoint:

    def test_round_trip(self, tmp_path):
        model = ToyRegressor(num_joints=6, stages=2, widths=(4, 4, 4), seed=11)
        path = str(tmp_path / "toy.spmc")
        save_checkpoint(model, path, epoch=7, extra={"mode": "vanilla"})
        loaded, header = load_checkpoint(path)
        assert header["epoch"] == 7
        assert header["mode"] == "vanilla"
        assert loaded.architecture() == model.architecture()
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name], model.params[name])
        image = np.random.default_rng(0).uniform(size=(6, 6, 3))
        a, _ = model.forward(image)
        b, _ = loaded.forward(image)
        np.testing.assert_array_equal(a[-1][1], b[-1][1])

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.spmc"
        path.write_bytes(b"SPMT" + b"\0" * 20)
        with pytest.raises(TensorFormatError):
            load_checkpoint(str(path))

    def test_rejects_truncation(self, tmp_path):
        model = ToyRegressor(num_joints=2, stages=1, widths=(4, 4, 4))
        path = tmp_path / "toy.spmc"
        save_checkpoint(model, str(path))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(TensorFormatError):
            load_checkpoint(str(path))
