import math

import numpy as np
import pytest

from tfczsl.classifier import (SEEN_VISUAL, UNSEEN_ATTRIBUTE, ClassifierConfig, LatentTrainingSet,
                               SoftmaxClassifier, fit_for_pool, predict, synthesize_latents,
                               train_softmax)
from tfczsl.errors import DataError, ShapeError
from tfczsl.nncore import DenseNet, Layer
from tfczsl.replay import Sample
from tfczsl.vae import CadaVae


def identity_model(d=2, d_a=3):
    """Visual encoder mean is the input itself; log-variance head is zero."""
    enc = DenseNet([Layer(np.vstack([np.eye(d), np.zeros((d, d))]), np.zeros(2 * d), "identity")])
    return CadaVae(enc, DenseNet.create([d_a, 2 * d], np.random.default_rng(0)),
                   DenseNet.zeros([d, d]), DenseNet.zeros([d, d_a]))


def clusters(n, seed):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n)
    X = rng.normal(scale=0.5, size=(2 * n, 2)) + np.where(y[:, None] == 0, -2.0, 2.0) * [1, 0]
    return X, y


def as_set(X, y):
    return LatentTrainingSet(X, y, np.full(len(y), SEEN_VISUAL))


def samples_of(X, y, d_a=3):
    return [Sample(x, int(c), np.zeros(d_a)) for x, c in zip(X, y)]


def test_seen_only_synthesis(rng):
    m = identity_model()
    X, y = clusters(3, 0)
    data = synthesize_latents(m, samples_of(X[:5], y[:5]), {}, (1, 0), rng)
    assert len(data) == 5 and set(data.provenance) == {SEEN_VISUAL}


def test_unseen_row_counts(rng):
    m = identity_model()
    data = synthesize_latents(m, [], {4: np.ones(3), 7: -np.ones(3)}, (2, 400), rng)
    assert len(data) == 800 and set(data.provenance) == {UNSEEN_ATTRIBUTE}
    assert np.bincount(data.labels).tolist()[4] == 400


def test_requested_counts_exact(rng):
    m = identity_model()
    X, y = clusters(4, 1)
    data = synthesize_latents(m, samples_of(X, y), {5: np.ones(3)}, (3, 11), rng)
    assert (data.provenance == SEEN_VISUAL).sum() == 24
    assert (data.provenance == UNSEEN_ATTRIBUTE).sum() == 11


def test_near_zero_variance_draws_coincide(rng):
    m = identity_model()
    head = m.attribute_encoder.layers[-1]
    head.weight[2:] = 0.0
    head.bias[2:] = -50.0
    data = synthesize_latents(m, [], {0: np.ones(3)}, (0, 50), rng)
    assert np.ptp(data.features, axis=0).max() < 1e-6


def test_missing_unseen_attributes(rng):
    with pytest.raises(DataError):
        synthesize_latents(identity_model(), [], {}, (2, 400), rng, expect_unseen=True)


def test_separable_clusters_fit_and_generalize():
    X, y = clusters(50, 0)
    clf = train_softmax(as_set(X, y), 2, epochs=200, lr=0.05)
    assert (np.argmax(clf.logits(X), axis=1) == y).mean() == 1.0
    Xt, yt = clusters(100, 1)
    assert (predict(clf, identity_model(), Xt) == yt).mean() >= 0.95


def test_duplicated_rows_give_same_classifier():
    X, y = clusters(20, 2)
    a = train_softmax(as_set(X, y), 2, epochs=50, lr=0.05)
    b = train_softmax(as_set(np.vstack([X, X]), np.concatenate([y, y])), 2, epochs=50, lr=0.05)
    np.testing.assert_allclose(a.weight, b.weight, rtol=1e-10, atol=1e-12)
    Xt, _ = clusters(30, 3)
    m = identity_model()
    assert np.array_equal(predict(a, m, Xt), predict(b, m, Xt))


def test_zero_classifier_loss_is_log_two():
    X, y = clusters(10, 0)
    assert abs(SoftmaxClassifier.zeros(2, 2).loss(as_set(X, y)) - math.log(2)) < 1e-15


def test_single_class_rejected():
    with pytest.raises(DataError):
        train_softmax(as_set(np.zeros((3, 2)), np.zeros(3, dtype=np.int64)))


def test_ties_go_to_lowest_label():
    clf = SoftmaxClassifier.zeros(4, 2)
    m = identity_model()
    assert predict(clf, m, np.array([0.3, 0.1])) == 0
    assert predict(clf, m, np.array([0.3, 0.1]), allowed=[3, 2]) == 2


def test_constant_logit_shift_keeps_predictions():
    X, y = clusters(20, 4)
    clf = train_softmax(as_set(X, y), 2, epochs=30)
    m = identity_model()
    before = predict(clf, m, X)
    clf.bias[:] += 7.5
    assert np.array_equal(before, predict(clf, m, X))


def test_prediction_dimension_check():
    with pytest.raises(ShapeError):
        predict(SoftmaxClassifier.zeros(2, 2), identity_model(), np.ones(3))


def test_minibatch_training_is_seeded():
    X, y = clusters(30, 5)
    a = train_softmax(as_set(X, y), 2, epochs=5, batch_size=8, rng=np.random.default_rng(1))
    b = train_softmax(as_set(X, y), 2, epochs=5, batch_size=8, rng=np.random.default_rng(1))
    assert a.weight.tobytes() == b.weight.tobytes()


def test_fit_for_pool_covers_seen_and_unseen():
    m = identity_model()
    X, y = clusters(10, 6)
    unseen = {2: np.ones(3)}
    clf = fit_for_pool(m, samples_of(X, y), unseen, 3, ClassifierConfig(epochs=20),
                       np.random.default_rng(0))
    assert clf.num_classes == 3


def test_classifier_round_trip():
    X, y = clusters(10, 7)
    clf = train_softmax(as_set(X, y), 2, epochs=10)
    back = SoftmaxClassifier.from_arrays(*clf.to_arrays())
    assert back.weight.tobytes() == clf.weight.tobytes()
