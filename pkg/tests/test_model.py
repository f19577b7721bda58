import numpy as np
import pytest

from kwsattn.audio_io import TASKS, AudioClip
from kwsattn.autodiff import Tensor, cross_entropy, dot_scores, gradcheck, softmax
from kwsattn.dsp import SpectrogramConfig
from kwsattn.errors import ConfigError, ShapeError
from kwsattn.model import (
    AttRnnConfig, AttRnnParams, argmax_lowest, attend, count_params, forward, forward_features,
    glorot_bound, init_params, param_shapes, predict_features,
)

TINY = AttRnnConfig(n_classes=3, n_mels=8, conv1_filters=3, lstm_hidden=4, query_dim=8, dense_sizes=(6, 5))


def tiny_params(seed=0):
    return init_params(TINY, seed=seed, dtype=np.float64)


def end_to_end_reports(seed=0, steps=12, batch=2):
    """Gradcheck of the cross-entropy loss against every trainable array of the tiny model."""
    rng = np.random.default_rng(seed)
    params = tiny_params(seed)
    for t in params.tensors.values():  # move away from the all-zero biases of the init
        t.data += 0.1 * rng.standard_normal(t.shape)
    mel = rng.standard_normal((batch, steps, TINY.n_mels))
    targets = rng.integers(0, TINY.n_classes, batch)

    def loss():
        logits, _ = forward_features(params, mel, "train")
        return cross_entropy(logits, targets)

    return {name: gradcheck(lambda _t: loss(), t, tol=1e-3) for name, t in params.tensors.items()}


class TestParamCount:
    def test_reference_breakdown(self):
        total, layers = count_params(AttRnnConfig(n_classes=12))
        assert layers["bilstm1"] == 74_240
        assert layers["bilstm2"] == 98_816
        assert layers["query"] == 16_512
        assert layers["conv1"] == 60 and layers["conv2"] == 51
        assert layers["dense1"] == 8_256 and layers["dense2"] == 2_080 and layers["out"] == 396
        assert total == 200_433

    @pytest.mark.parametrize("task", sorted(TASKS))
    def test_budget_for_every_task(self, task):
        total, _ = count_params(AttRnnConfig(n_classes=TASKS[task].n_classes))
        assert abs(total - 202_000) / 202_000 < 0.02

    def test_count_matches_materialized_arrays(self):
        cfg = AttRnnConfig(n_classes=36)
        assert count_params(cfg)[0] == init_params(cfg).n_trainable()
        assert count_params(cfg)[0] == sum(int(np.prod(s)) for s in param_shapes(cfg).values())

    @pytest.mark.parametrize("kw", [{"query_dim": 64}, {"conv2_filters": 2}, {"conv1_kt": 4}, {"n_classes": 1}])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            AttRnnConfig(**kw)

    def test_config_dict_roundtrip(self):
        assert AttRnnConfig.from_dict(TINY.to_dict()) == TINY


class TestInit:
    def test_seeded(self):
        a, b, c = init_params(TINY, 3), init_params(TINY, 3), init_params(TINY, 4)
        for name in a.tensors:
            np.testing.assert_array_equal(a[name].data, b[name].data)
        assert any(not np.array_equal(a[n].data, c[n].data) for n in a.tensors)

    def test_recurrent_blocks_orthogonal(self):
        p = init_params(AttRnnConfig(), seed=1, dtype=np.float64)
        u = p["lstm1_fwd/U"].data
        for k in range(4):
            block = u[:, 64 * k:64 * (k + 1)]
            np.testing.assert_allclose(block.T @ block, np.eye(64), atol=1e-12)

    def test_glorot_bounds_and_biases(self):
        p = init_params(AttRnnConfig(), seed=2)
        w = p["dense1/W"].data
        assert np.abs(w).max() <= glorot_bound(128, 64)
        assert np.abs(w).max() > 0.9 * glorot_bound(128, 64)
        b = p["lstm2_bwd/b"].data
        assert np.all(b[64:128] == 1) and np.all(b[:64] == 0) and np.all(b[128:] == 0)
        assert np.all(p["bn1/gamma"].data == 1) and np.all(p["out/b"].data == 0)

    def test_param_dtype(self):
        assert init_params(TINY).dtype == np.float32

    def test_mismatched_arrays_rejected(self):
        arrays = tiny_params().arrays()
        arrays["dense1/W"] = np.zeros((8, 7))
        with pytest.raises(ShapeError):
            AttRnnParams.from_arrays(TINY, arrays)


class TestAttention:
    def test_random_inputs_are_distributions(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            steps, d = rng.integers(1, 30), 6
            seq = Tensor(rng.standard_normal((steps, d)) * 2)
            ctx, w = attend(seq, Tensor(rng.standard_normal((d, d))), Tensor(rng.standard_normal(d)))
            assert np.all(w.data >= 0)
            assert abs(w.data.sum() - 1) < 1e-6
            assert ctx.shape == (d,)

    def test_identical_rows_give_uniform_weights(self):
        seq = Tensor(np.tile(np.random.default_rng(1).standard_normal(4), (9, 1)))
        ctx, w = attend(seq, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(w.data, 1 / 9, atol=1e-12)
        np.testing.assert_allclose(ctx.data, seq.data[0], atol=1e-12)

    def test_single_frame(self):
        _, w = attend(Tensor(np.ones((1, 4))), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert w.data.tolist() == [1.0]

    def test_dominant_score_takes_the_mass(self):
        seq = np.zeros((5, 2))
        seq[2] = [1.0, 0.0]  # middle frame is the query source
        seq[4] = [5.0, 0.0]
        _, w = attend(Tensor(seq), Tensor(10 * np.eye(2)), Tensor(np.zeros(2)))
        # scores: 0, 0, 10, 0, 50 -> frame 4 wins by a margin of 40
        assert w.data[4] > 1 - 1e-15 and w.data[2] == pytest.approx(np.exp(-40), rel=1e-9)

    def test_weights_are_softmax_of_dot_scores(self):
        rng = np.random.default_rng(2)
        seq = Tensor(rng.standard_normal((3, 7, 4)))
        wq, bq = Tensor(rng.standard_normal((4, 4))), Tensor(rng.standard_normal(4))
        _, w = attend(seq, wq, bq)
        query = seq.data[:, 3] @ wq.data + bq.data
        scores = dot_scores(seq, Tensor(query)).data
        np.testing.assert_allclose(w.data, softmax(Tensor(scores + 123.0)).data, atol=1e-12)

    def test_argmax_ties_go_low(self):
        assert argmax_lowest(np.array([0.1, 0.5, 0.5])) == 1


class TestForward:
    def test_shapes_and_trace(self):
        params = init_params(AttRnnConfig(), seed=0)
        clip = AudioClip(np.random.default_rng(0).uniform(-0.3, 0.3, 16000))
        logits, trace = forward(clip, params)
        assert logits.shape == (12,)
        assert trace.weights.shape == (126,) and trace.query_frame_index == 63
        assert abs(trace.weights.sum() - 1) < 1e-5
        assert abs(trace.probabilities.sum() - 1) < 1e-12
        assert trace.predicted_class == int(np.argmax(logits.data))

    def test_deterministic(self):
        params = tiny_params()
        mel = np.random.default_rng(1).standard_normal((2, 10, 8))
        a, wa = forward_features(params, mel)
        b, wb = forward_features(params, mel)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(wa.data, wb.data)

    def test_zero_clip_is_finite(self):
        _, trace = forward(AudioClip(np.zeros(16000)), init_params(AttRnnConfig(), seed=0))
        assert np.all(np.isfinite(trace.logits)) and np.all(np.isfinite(trace.weights))

    def test_batch_equals_single(self):
        params = tiny_params()
        mel = np.random.default_rng(2).standard_normal((3, 10, 8))
        batch, _ = forward_features(params, mel)
        for i in range(3):
            single, _ = forward_features(params, mel[i])
            np.testing.assert_allclose(batch.data[i], single.data, rtol=1e-12)
        logits, weights = predict_features(params, mel, batch_size=2)
        np.testing.assert_allclose(logits, batch.data, rtol=1e-12)
        assert weights.shape == (3, 10)

    def test_train_mode_updates_running_stats_only_in_train(self):
        params = tiny_params()
        before = params["bn1/gamma"].data.copy(), params.bn["bn1"].running_mean.copy()
        mel = np.random.default_rng(3).standard_normal((2, 10, 8)) + 3
        forward_features(params, mel, "infer")
        np.testing.assert_array_equal(params.bn["bn1"].running_mean, before[1])
        forward_features(params, mel, "train")
        assert not np.array_equal(params.bn["bn1"].running_mean, before[1])

    def test_shape_error_names_layer(self):
        with pytest.raises(ShapeError, match="input"):
            forward_features(tiny_params(), np.zeros((10, 9)))
        params = tiny_params()
        params.tensors["query/W"] = Tensor(np.zeros((8, 5)))
        with pytest.raises(ShapeError, match="attention"):
            forward_features(params, np.zeros((10, 8)))

    def test_frontend_mismatch(self):
        clip = AudioClip(np.zeros(16000))
        with pytest.raises(ConfigError):
            forward(clip, tiny_params(), spec_cfg=SpectrogramConfig(n_mels=40))

    def test_end_to_end_gradcheck(self):
        reports = end_to_end_reports()
        bad = {n: str(r) for n, r in reports.items() if not r.passed}
        assert not bad, bad
