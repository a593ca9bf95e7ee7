import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import CheckpointError, NumericalError, StaleCacheError
from losses import cross_entropy
from model_grad import (FeatureExtractor, LinearClassifier, OptimizerState, SsdaModel, accumulate, backward,
                        forward_features, forward_probs, load_checkpoint, probs_to_logits_grad, save_checkpoint,
                        sgd_step)
from prototype_store import PrototypeSet


@pytest.fixture
def model():
    return SsdaModel.create(input_dim=3, class_count=4, hidden_dims=(5,), feature_dim=6, seed=7)


@pytest.fixture
def inputs():
    return np.random.default_rng(11).standard_normal((8, 3))


def _ce_objective(model, x, y):
    f, _ = model.extractor.forward(x)
    p, _ = model.classifier.forward(f)
    return cross_entropy(p, y).value


class TestForward:
    def test_features_are_unit_norm(self, model, inputs):
        features, _ = forward_features(model.extractor, inputs * 100.0)
        assert_allclose(np.linalg.norm(features, axis=1), 1.0, atol=1e-9)

    def test_identical_rows(self, model):
        features, _ = forward_features(model.extractor, np.ones((3, 3)))
        assert np.array_equal(features[0], features[1])
        assert np.array_equal(features[1], features[2])

    def test_zero_network_nudges_degenerate_rows(self, caplog):
        extractor = FeatureExtractor(2, (3,), 4)
        for w in extractor.weights:
            w[...] = 0.0
        features, _ = forward_features(extractor, np.ones((2, 2)))
        assert np.all(np.isfinite(features))
        assert_allclose(np.linalg.norm(features, axis=1), 1.0, atol=1e-9)
        assert 'zero-norm' in caplog.text

    def test_input_dim_mismatch(self, model):
        with pytest.raises(ValueError):
            forward_features(model.extractor, np.ones((2, 4)))

    def test_zero_classifier_is_uniform(self):
        classifier = LinearClassifier(3, 4)
        classifier.weight[...] = 0.0
        probs, _ = forward_probs(classifier, np.eye(3))
        assert_allclose(probs, np.full((3, 4), 0.25))

    def test_single_class(self):
        probs, _ = forward_probs(LinearClassifier(3, 1), np.eye(3))
        assert_allclose(probs, np.ones((3, 1)))

    def test_identity_classifier(self):
        classifier = LinearClassifier(3, 3)
        classifier.weight[...] = np.eye(3)
        probs, _ = forward_probs(classifier, [[1.0, 0.0, 0.0]])
        e = np.exp(1.0)
        assert_allclose(probs, [[e / (e + 2), 1 / (e + 2), 1 / (e + 2)]])


class TestBackward:
    def test_zero_upstream_gradient(self, model, inputs):
        features, fcache = forward_features(model.extractor, inputs)
        probs, ccache = forward_probs(model.classifier, features)
        grads = backward(model, fcache, ccache, np.zeros_like(probs), np.zeros_like(features))
        assert all(not np.any(g) for g in grads.values())
        assert list(grads) == list(model.parameters())

    def test_matches_finite_differences(self, model, inputs):
        y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        features, fcache = forward_features(model.extractor, inputs)
        probs, ccache = forward_probs(model.classifier, features)
        ce = cross_entropy(probs, y)
        grads = backward(model, fcache, ccache, probs_to_logits_grad(probs, ce.grads['probs']))
        h = 1e-6
        for name, p in model.parameters().items():
            numeric = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                saved = p[idx]
                p[idx] = saved + h
                up = _ce_objective(model, inputs, y)
                p[idx] = saved - h
                down = _ce_objective(model, inputs, y)
                p[idx] = saved
                numeric[idx] = (up - down) / (2 * h)
            assert_allclose(grads[name], numeric, atol=1e-7, err_msg=name)

    def test_feature_gradient_path(self, model, inputs):
        g = np.random.default_rng(3).standard_normal((8, 6))
        features, fcache = forward_features(model.extractor, inputs)
        grads = backward(model, fcache, None, grad_features=g)
        assert not np.any(grads['F.W'])
        w0 = model.parameters()['G.W0']
        h = 1e-6
        idx = (1, 2)
        saved = w0[idx]
        w0[idx] = saved + h
        up = np.sum(g * model.extractor.forward(inputs)[0])
        w0[idx] = saved - h
        down = np.sum(g * model.extractor.forward(inputs)[0])
        w0[idx] = saved
        assert grads['G.W0'][idx] == pytest.approx((up - down) / (2 * h), abs=1e-7)

    def test_zero_feature_row_is_constant(self):
        extractor = FeatureExtractor(2, (64,), 16, rng=np.random.default_rng(0))
        x = np.array([[0.5, -1.0], [0.0, 0.0]])
        upstream = np.random.default_rng(1).standard_normal((2, 16)) / 64
        _, cache = forward_features(extractor, x)
        assert cache.degenerate.tolist() == [False, True]
        grads = extractor.backward(cache, upstream)
        _, single = forward_features(extractor, x[:1])
        expected = extractor.backward(single, upstream[:1])
        for name in grads:
            assert_allclose(grads[name], expected[name], atol=1e-12, err_msg=name)
        assert np.max(np.abs(grads['G.b0'])) < 1e3

    def test_stale_cache(self, model, inputs):
        features, fcache = forward_features(model.extractor, inputs)
        probs, ccache = forward_probs(model.classifier, features)
        model.bump_version()
        with pytest.raises(StaleCacheError):
            backward(model, fcache, ccache, np.zeros_like(probs))
        with pytest.raises(StaleCacheError):
            backward(model, fcache, None, grad_features=np.zeros_like(features))

    def test_accumulate(self):
        total = accumulate({}, {'a': np.ones(2)})
        total = accumulate(total, {'a': np.ones(2), 'b': np.zeros(1)})
        assert_allclose(total['a'], [2.0, 2.0])
        assert 'b' in total


class TestSgdStep:
    def test_zero_gradient(self):
        params = {'w': np.array([1.0, -2.0])}
        sgd_step(params, {'w': np.zeros(2)}, OptimizerState())
        assert_allclose(params['w'], [1.0, -2.0])

    def test_plain_descent_without_momentum(self):
        params = {'w': np.array([1.0, -2.0])}
        sgd_step(params, {'w': np.array([0.5, 0.5])}, OptimizerState(learning_rate=0.1, momentum=0.0))
        assert_allclose(params['w'], [0.95, -2.05])

    def test_momentum_accumulates(self):
        g = np.array([1.0, 2.0])
        params = {'w': np.zeros(2)}
        state = OptimizerState(learning_rate=1.0, momentum=0.9)
        sgd_step(params, {'w': g}, state)
        sgd_step(params, {'w': g}, state)
        assert_allclose(state.velocity['w'], 1.9 * g)
        assert_allclose(params['w'], -2.9 * g)
        assert state.step == 2

    def test_lr_schedule(self):
        state = OptimizerState(learning_rate=0.1, lr_gamma=0.001, lr_power=0.75, step=1000)
        assert state.current_lr() == pytest.approx(0.1 * 2 ** -0.75)

    def test_non_finite_gradient(self):
        params = {'w': np.zeros(2)}
        with pytest.raises(NumericalError):
            sgd_step(params, {'w': np.array([np.nan, 0.0])}, OptimizerState())
        assert_allclose(params['w'], 0.0)

    def test_unknown_parameter(self):
        with pytest.raises(ValueError):
            sgd_step({'w': np.zeros(2)}, {'v': np.zeros(2)}, OptimizerState())

    def test_loss_decreases_without_momentum(self, model, inputs):
        y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        state = OptimizerState(learning_rate=0.05, momentum=0.0)
        for _ in range(3):
            before = _ce_objective(model, inputs, y)
            features, fcache = forward_features(model.extractor, inputs)
            probs, ccache = forward_probs(model.classifier, features)
            ce = cross_entropy(probs, y)
            grads = backward(model, fcache, ccache, probs_to_logits_grad(probs, ce.grads['probs']))
            state = model.apply_gradients(grads, state)
            assert _ce_objective(model, inputs, y) < before


def test_training_steps_are_deterministic(inputs):
    y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    finals = []
    for _ in range(2):
        m = SsdaModel.create(3, 4, (5,), 6, seed=3)
        state = OptimizerState()
        for _ in range(5):
            features, fcache = forward_features(m.extractor, inputs)
            probs, ccache = forward_probs(m.classifier, features)
            ce = cross_entropy(probs, y)
            state = m.apply_gradients(backward(m, fcache, ccache, probs_to_logits_grad(probs, ce.grads['probs'])),
                                      state)
        finals.append({k: v.copy() for k, v in m.parameters().items()})
    for name in finals[0]:
        assert np.array_equal(finals[0][name], finals[1][name])


class TestCheckpoint:
    def test_round_trip(self, model, tmp_path):
        store = PrototypeSet(np.eye(4, 6), momentum=0.8)
        path = save_checkpoint(str(tmp_path / 'ckpt' / 'model.bin'), model, store, step=42)
        loaded, loaded_store, step = load_checkpoint(path)
        assert step == 42
        assert loaded.extractor.hidden_dims == (5,)
        for name, p in model.parameters().items():
            assert np.array_equal(loaded.parameters()[name], p)
        assert np.array_equal(loaded_store.prototypes, store.prototypes)
        assert loaded_store.momentum == 0.8

    def test_corrupted_byte_fails_crc(self, model, tmp_path):
        path = save_checkpoint(str(tmp_path / 'model.bin'), model, PrototypeSet(np.eye(4, 6)))
        blob = bytearray(open(path, 'rb').read())
        blob[40] ^= 0xFF
        open(path, 'wb').write(bytes(blob))
        with pytest.raises(CheckpointError, match='CRC'):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / 'junk.bin'
        path.write_bytes(b'not a checkpoint at all')
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))
