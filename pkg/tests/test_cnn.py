import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gftdefect.cnn import (
    CnnArch,
    TrainConfig,
    backward,
    conv_output_length,
    defect_score,
    evaluate,
    forward,
    forward_cache,
    init_model,
    load_checkpoint,
    loss,
    loss_grad_z,
    one_hot,
    param_shapes,
    predict,
    save_checkpoint,
    train,
)
from gftdefect.data import SpectralDataset
from gftdefect.errors import CompatibilityError, ConfigError, DivergenceError, ShapeError

from oracles import central_difference, naive_cnn_forward

TINY = CnnArch(input_length=12, channels=(2, 3), hidden=4, dropout=0.0)


def _dataset(x, y, test_every=5):
    is_test = np.arange(len(y)) % test_every == 0
    return SpectralDataset(x, np.asarray(y, dtype=np.uint8), is_test, 0, "test")


class TestShapes:
    def test_reference_architecture(self):
        a = CnnArch()
        assert a.conv_lengths() == (1365, 455)
        assert a.flat_size == 29120
        shapes = param_shapes(a)
        assert shapes["dense1_w"] == (29120, 128) and shapes["dense2_w"] == (128, 2)

    @given(st.integers(1, 200), st.integers(1, 5), st.integers(1, 4))
    def test_output_length_formula(self, length, k, s):
        if length < k:
            return
        expected = (length - k) // s + 1
        assert conv_output_length(length, k, s) == expected
        arch = CnnArch(input_length=length, channels=(2, 2), kernel_size=k, stride=s, hidden=3, dropout=0)
        l2 = (expected - k) // s + 1
        if expected < k:
            with pytest.raises(ConfigError):
                init_model(arch, 0)
            return
        m = init_model(arch, 0)
        cache = forward_cache(m, np.zeros((2, length)))
        assert cache.z1.shape == (2, expected, 2)
        assert cache.z2.shape == (2, l2, 2)
        assert cache.out.shape == (2, 2)

    def test_wrong_input_length(self):
        m = init_model(TINY, 0)
        with pytest.raises(ShapeError):
            forward(m, np.zeros(13))

    @pytest.mark.parametrize(
        "kw", [{"dropout": 1.0}, {"dropout": -0.1}, {"channels": (0, 3)}, {"activation": "tanh"}, {"input_length": 4}]
    )
    def test_invalid_arch(self, kw):
        with pytest.raises(ConfigError):
            init_model(dataclasses.replace(TINY, **kw), 0)


class TestInitForward:
    def test_same_seed(self):
        a, b = init_model(TINY, 3), init_model(TINY, 3)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
        c = init_model(TINY, 4)
        assert not np.array_equal(a.params["conv1_w"], c.params["conv1_w"])

    def test_biases_zero_and_limits(self):
        m = init_model(CnnArch(), 0)
        for name, arr in m.params.items():
            if name.endswith("_b"):
                assert not arr.any()
            else:
                assert np.abs(arr).max() <= np.sqrt(6 / arr.shape[0])

    def test_zero_weights(self):
        m = init_model(TINY, 0)
        for arr in m.params.values():
            arr[...] = 0
        np.testing.assert_array_equal(forward(m, np.random.default_rng(0).random(12)), [0.5, 0.5])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        for arch in (TINY, dataclasses.replace(TINY, stride=1, input_length=9), dataclasses.replace(TINY, output="softmax")):
            m = init_model(arch, 2)
            for name in m.params:
                m.params[name] = rng.normal(size=m.params[name].shape)
            x = rng.normal(size=arch.input_length)
            expected = naive_cnn_forward(m.params, x, arch.kernel_size, arch.stride, output=arch.output)
            np.testing.assert_allclose(forward(m, x), expected, rtol=1e-12, atol=1e-14)

    def test_infer_deterministic_and_open_interval(self):
        m = init_model(CnnArch(), 0, dtype=np.float32)
        x = np.random.default_rng(0).normal(size=(3, 4096)) * 1e4
        a, b = forward(m, x), forward(m, x)
        np.testing.assert_array_equal(a, b)
        assert np.all((a > 0) & (a < 1))

    def test_batching_invariant(self):
        m = init_model(TINY, 5)
        x = np.random.default_rng(5).normal(size=(37, 12))
        np.testing.assert_array_equal(forward(m, x, batch_size=7), np.concatenate([forward(m, x[:20]), forward(m, x[20:])]))


class TestLoss:
    def test_half(self):
        assert loss([0.5, 0.5], [0, 1]) == pytest.approx(0.693147, abs=1e-6)

    def test_limit(self):
        assert loss([1 - 1e-9, 1 - 1e-9], [0, 1]) == pytest.approx(np.log(2))
        assert loss([1e-9, 1 - 1e-9], [0, 1]) < 1e-8
        assert loss([0.0, 1.0], [0, 1]) == pytest.approx(1e-12)  # clamped
        assert loss([1.0, 0.0], [0, 1]) == pytest.approx(-np.log(1e-12))

    @given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6), st.integers(0, 1))
    def test_non_negative(self, p0, p1, y):
        assert loss([p0, p1], one_hot([y])[0]) >= 0


def _loss_of(model, x, t):
    return loss(forward_cache(model, x).out, t)


class TestGradient:
    @pytest.mark.parametrize(
        "arch",
        [
            TINY,
            dataclasses.replace(TINY, output="softmax"),
            dataclasses.replace(TINY, input_length=16, kernel_size=3, stride=1, channels=(4, 4)),
            dataclasses.replace(TINY, input_length=14, kernel_size=2, stride=2),
        ],
        ids=["sigmoid", "softmax", "overlapping", "k2"],
    )
    def test_central_difference(self, arch):
        rng = np.random.default_rng(7)
        m = init_model(arch, 11)
        for name in m.params:
            m.params[name] += 0.1 * rng.normal(size=m.params[name].shape)
        x = rng.normal(size=(5, arch.input_length))
        t = one_hot(rng.integers(0, 2, size=5))
        cache = forward_cache(m, x)
        grads, dx = backward(m, cache, loss_grad_z(cache.out, t, arch.output), input_grad=True)
        numeric = central_difference(lambda: _loss_of(m, x, t), m.params, step=1e-5)
        worst = 0.0
        for name in m.params:
            a, n = grads[name], numeric[name]
            rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-7)
            worst = max(worst, rel.max())
        assert worst <= 1e-4
        x_num = central_difference(lambda: _loss_of(m, x, t), {"x": x}, step=1e-5)["x"]
        np.testing.assert_allclose(dx, x_num, rtol=1e-4, atol=1e-9)


class TestDropout:
    def test_expectation(self):
        arch = CnnArch(input_length=96, channels=(2, 4), hidden=8, dropout=0.5)
        m = init_model(arch, 0)
        x = np.tile(np.random.default_rng(0).normal(size=(1, 96)), (2500, 1))  # 2500 x 40 = 1e5 draws
        rng = np.random.default_rng(1)
        train_c = forward_cache(m, x, train=True, rng=rng)
        infer_c = forward_cache(m, x[:1])
        assert train_c.drop.size == 100000
        assert abs(train_c.drop.mean() - 1.0) <= 0.01
        keep = (train_c.drop > 0).mean()
        assert abs(keep - 0.5) <= 0.01
        # pooled over all 1e5 dropped activations vs the undropped ones
        ratio = train_c.flat.sum() / (len(x) * infer_c.flat.sum())
        assert abs(ratio - 1.0) <= 0.01

    def test_train_mode_needs_rng(self):
        with pytest.raises(ValueError):
            forward(init_model(TINY, 0), np.zeros(12), mode="train")


class TestPredict:
    def _fixed(self, p0, p1):
        m = init_model(TINY, 0)
        for arr in m.params.values():
            arr[...] = 0
        m.params["dense2_b"][:] = np.log([p0 / (1 - p0), p1 / (1 - p1)])
        return m

    @pytest.mark.parametrize("p,label", [((0.9, 0.1), 0), ((0.1, 0.9), 1), ((0.5, 0.5), 0)])
    def test_rule(self, p, label):
        got, score = predict(self._fixed(*p), np.zeros(12))
        assert got == label
        assert score == pytest.approx(p[1])

    def test_batch(self):
        labels, scores = predict(self._fixed(0.2, 0.6), np.zeros((3, 12)))
        assert labels.tolist() == [1, 1, 1]
        np.testing.assert_allclose(scores, 0.75)

    def test_defect_score_clamped(self):
        assert 0 < defect_score(np.array([1.0, 1e-300])) < 1
        assert 0 < defect_score(np.array([1e-300, 1.0])) < 1
        assert defect_score(np.array([0.3, -2.0]), "identity") == -2.0


def _blobs(n, dim, margin, seed):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    x = rng.normal(size=(n, dim)) + np.outer(2 * y - 1, direction) * margin
    return x, y


class TestTrain:
    def test_gaussian_blobs_4096(self):
        x, y = _blobs(300, 4096, margin=20.0, seed=0)
        m, report = train(init_model(CnnArch(), 0), _dataset(x, y), TrainConfig(epochs=5, seed=1))
        assert len(report.epochs) == 5
        assert report.final["test_acc"] == 1.0
        assert report.epochs[-1]["train_loss"] <= report.epochs[0]["train_loss"]

    def test_zero_learning_rate(self):
        x, y = _blobs(60, 12, margin=3.0, seed=1)
        ds = _dataset(x, y)
        m0 = init_model(TINY, 0)
        m1, report = train(m0, ds, TrainConfig(learning_rate=0.0, epochs=2, dtype="float64"))
        for k in m0.params:
            np.testing.assert_array_equal(m0.params[k], m1.params[k])
        # accuracy equals that of the untouched initial model (same scaler)
        m0.scaler_mean, m0.scaler_std = m1.scaler_mean, m1.scaler_std
        assert report.final["train_acc"] == evaluate(m0, *ds.train)[1]

    def test_deterministic(self, tmp_path):
        x, y = _blobs(80, 12, margin=1.0, seed=2)
        ds = _dataset(x, y)
        runs = []
        for i in range(2):
            m, rep = train(init_model(dataclasses.replace(TINY, dropout=0.3), 4), ds, TrainConfig(epochs=3, seed=9))
            save_checkpoint(m, tmp_path / f"c{i}.bin", seed=9)
            runs.append(rep.to_json())
        assert runs[0] == runs[1]
        assert (tmp_path / "c0.bin").read_bytes() == (tmp_path / "c1.bin").read_bytes()

    def test_divergence(self):
        x, y = _blobs(40, 12, margin=1.0, seed=3)
        x[1, 0] = np.inf  # a training row
        with pytest.raises(DivergenceError) as err:
            train(init_model(TINY, 0), _dataset(x, y), TrainConfig(epochs=1, scaling="none"))
        assert err.value.epoch == 1

    @pytest.mark.parametrize("kw", [{"learning_rate": -1}, {"epochs": 0}, {"batch_size": 0}, {"scaling": "minmax"}, {"dtype": "int8"}])
    def test_invalid_config(self, kw):
        x, y = _blobs(10, 12, 1.0, 0)
        with pytest.raises(ConfigError):
            train(init_model(TINY, 0), _dataset(x, y), TrainConfig(**kw))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = init_model(TINY, 1)
        m.scaler_mean, m.scaler_std = np.arange(12.0), np.ones(12) * 2
        save_checkpoint(m, tmp_path / "m.bin", seed=5, spectrum_version="v-test")
        back, meta = load_checkpoint(tmp_path / "m.bin", spectrum_version="v-test")
        assert back.arch == m.arch and meta["seed"] == 5
        for k in m.params:
            np.testing.assert_array_equal(back.params[k], m.params[k])
        x = np.random.default_rng(0).random(12)
        np.testing.assert_array_equal(forward(back, x), forward(m, x))

    def test_spectrum_mismatch(self, tmp_path):
        save_checkpoint(init_model(TINY, 1), tmp_path / "m.bin", spectrum_version="a")
        with pytest.raises(CompatibilityError):
            load_checkpoint(tmp_path / "m.bin", spectrum_version="b")

    def test_wrong_kind(self, tmp_path):
        from gftdefect.containers import write_container
        from gftdefect.errors import FormatError

        write_container(tmp_path / "x.bin", "dataset", {}, {})
        with pytest.raises((FormatError, CompatibilityError)):
            load_checkpoint(tmp_path / "x.bin")
