import numpy as np
import pytest

from paneldx.classifier import (
    Classifier,
    WeightedCEConfig,
    ce_train_step,
    softmax_pair,
    weighted_ce_loss,
)
from paneldx.errors import ContractError
from paneldx.ndgrad import finite_difference_grad, zero_grads


def test_softmax_arithmetic():
    probs = softmax_pair(np.array([[0.0, np.log(3.0)]]))
    np.testing.assert_allclose(probs, [[0.25, 0.75]], atol=1e-12)


def test_zero_weight_network_is_uniform():
    clf = Classifier(3, WeightedCEConfig(), seed=0)
    for w in clf.net.weights:
        w.data[:] = 0.0
    p = clf.predict_proba(np.array([1.0, -2.0, 3.0]))
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)


def test_probabilities_valid_range():
    rng = np.random.default_rng(1)
    clf = Classifier(4, WeightedCEConfig(), seed=2)
    x = rng.normal(size=(50, 4))
    p = clf.predict_proba(x)
    assert np.all(p > 0) and np.all(p < 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_confident_correct_predictions_near_zero_loss():
    cfg = WeightedCEConfig(weight_neg=1.0, weight_pos=1.0)
    clf = Classifier(1, cfg, seed=3)
    # force huge correct logits via direct parameter surgery
    for w in clf.net.weights:
        w.data[:] = 0.0
    for b in clf.net.biases:
        b.data[:] = 0.0
    clf.net.weights[0].data[0, 0] = 1.0
    clf.net.weights[1].data[0, 0] = 1.0
    clf.net.weights[2].data[0, :] = [-50.0, 50.0]
    x = np.array([[1.0]])
    loss = weighted_ce_loss(clf.net, x, np.array([1]), 1.0, 1.0)
    assert float(loss.data) < 1e-12


def test_doubling_weights_doubles_loss_and_grads():
    rng = np.random.default_rng(4)
    clf = Classifier(3, WeightedCEConfig(), seed=5)
    x = rng.normal(size=(16, 3))
    y = rng.integers(0, 2, size=16)

    zero_grads(clf.net.params)
    l1 = weighted_ce_loss(clf.net, x, y, 1.0, 5.0)
    l1.backward()
    g1 = [p.grad.copy() for p in clf.net.params]

    zero_grads(clf.net.params)
    l2 = weighted_ce_loss(clf.net, x, y, 2.0, 10.0)
    l2.backward()
    assert float(l2.data) == pytest.approx(2 * float(l1.data), rel=1e-12)
    for p, g in zip(clf.net.params, g1):
        np.testing.assert_allclose(p.grad, 2 * g, atol=1e-12)


def test_ce_gradcheck():
    rng = np.random.default_rng(6)
    clf = Classifier(2, WeightedCEConfig(hidden=6), seed=7)
    x = rng.normal(size=(5, 2))
    y = rng.integers(0, 2, size=5)

    def loss():
        return weighted_ce_loss(clf.net, x, y, 1.0, 3.0)

    zero_grads(clf.net.params)
    loss().backward()
    fd = finite_difference_grad(loss, clf.net.params)
    for p, g in zip(clf.net.params, fd):
        denom = np.maximum(np.abs(g), 1e-6)
        assert np.max(np.abs(p.grad - g) / denom) < 1e-4


def test_weight_scaling_homogeneity():
    # weights * c with stepsize / c: parameter trajectories agree
    rng = np.random.default_rng(8)
    x = rng.normal(size=(200, 2))
    y = (x[:, 0] + 0.3 * rng.normal(size=200) > 0).astype(int)
    c = 4.0
    cfg_a = WeightedCEConfig(weight_neg=1.0, weight_pos=5.0, learning_rate=1e-3,
                             hidden=8)
    cfg_b = WeightedCEConfig(weight_neg=c, weight_pos=5.0 * c,
                             learning_rate=1e-3 / c, hidden=8)
    clf_a = Classifier(2, cfg_a, seed=9)
    clf_b = Classifier(2, cfg_b, seed=9)
    for step in range(100):
        sl = slice((step * 20) % 200, (step * 20) % 200 + 20)
        ce_train_step(clf_a, x[sl], y[sl])
        ce_train_step(clf_b, x[sl], y[sl])
    for pa, pb in zip(clf_a.net.params, clf_b.net.params):
        np.testing.assert_allclose(pa.data, pb.data, atol=1e-9)


def test_linearly_separable_accuracy():
    rng = np.random.default_rng(10)
    n = 400
    y = rng.integers(0, 2, size=n)
    x = rng.normal(size=(n, 2)) * 0.3 + np.where(y[:, None] == 1, 1.0, -1.0)
    clf = Classifier(2, WeightedCEConfig(), seed=11)
    for step in range(2000):
        idx = rng.integers(0, n, size=64)
        ce_train_step(clf, x[idx], y[idx])
    pred = clf.predict_proba(x).argmax(axis=1)
    assert (pred == y).mean() >= 0.99


def test_empty_minibatch_rejected():
    clf = Classifier(2, WeightedCEConfig(), seed=0)
    with pytest.raises(ContractError):
        ce_train_step(clf, np.empty((0, 2)), np.array([], dtype=int))


def test_version_bumps_on_step():
    clf = Classifier(2, WeightedCEConfig(), seed=0)
    assert clf.version == 0
    ce_train_step(clf, np.zeros((4, 2)), np.array([0, 1, 0, 1]))
    assert clf.version == 1
    assert clf.clone().version == 1
