import json
import math

import numpy as np
import pytest

from trafficlearn.data import FlowRecord, features_matrix, synth_gaussians
from trafficlearn.model import (
    Classifier,
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    expand_output,
    mean_cross_entropy,
    softmax,
    train,
)


def test_softmax_symmetry():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5])


def test_softmax_large_logits_no_overflow():
    out = softmax([1000.0, 1000.0, 1000.0])
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_reference_values():
    # frozen from a 50-digit arbitrary-precision evaluation
    expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
    out = softmax([1.0, 2.0, 3.0])
    assert np.allclose(out, expected, rtol=0, atol=1e-15)
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 50
    s = sum(mpmath.exp(v) for v in [1, 2, 3])
    oracle = [float(mpmath.exp(v) / s) for v in [1, 2, 3]]
    assert np.allclose(expected, oracle, rtol=0, atol=1e-16)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    for _ in range(200):
        z = rng.normal(scale=5, size=rng.integers(1, 8))
        c = rng.normal(scale=100)
        a, b = softmax(z), softmax(z + c)
        assert np.allclose(a, b, atol=1e-12)
        assert np.argmax(a) == np.argmax(b)
        assert abs(a.sum() - 1.0) < 1e-6


def test_softmax_empty_errors():
    with pytest.raises(ValueError):
        softmax([])


def make_model(seed=0, d=4, hidden=(8,), e=3, classes=("a", "b")):
    return Classifier(input_dim=d, hidden=hidden, embedding_dim=e, classes=classes, seed=seed)


def test_forward_zero_weights_uniform():
    m = make_model(classes=("a", "b", "c"))
    for w in m.weights:
        w[...] = 0.0
    emb, probs = m.forward(np.ones(4))
    assert np.allclose(emb, 0.0)
    assert np.allclose(probs, 1 / 3)


def test_forward_probs_sum_to_one():
    m = make_model(seed=3)
    rng = np.random.default_rng(1)
    for _ in range(20):
        _, probs = m.forward(rng.normal(size=4))
        assert abs(probs.sum() - 1.0) < 1e-6
        assert np.all(probs >= 0) and np.all(probs <= 1)


def test_forward_dimension_mismatch():
    m = make_model()
    with pytest.raises(ValueError, match="features"):
        m.forward(np.ones(5))


def test_forward_matches_hand_rolled_reference():
    # independent forward pass written with explicit loops
    m = Classifier(input_dim=4, hidden=(8,), embedding_dim=3, classes=("a", "b"), seed=11)
    x = np.array([0.3, -1.2, 2.0, 0.7])

    def ref_linear(v, W, b):
        out = []
        for j in range(W.shape[1]):
            acc = b[j]
            for i in range(W.shape[0]):
                acc += v[i] * W[i, j]
            out.append(acc)
        return out

    h = [max(0.0, v) for v in ref_linear(x, m.weights[0], m.biases[0])]
    emb_ref = ref_linear(h, m.weights[1], m.biases[1])
    logits_ref = ref_linear(emb_ref, m.weights[2], m.biases[2])
    mx = max(logits_ref)
    exps = [math.exp(v - mx) for v in logits_ref]
    probs_ref = [v / sum(exps) for v in exps]

    emb, probs = m.forward(x)
    assert np.allclose(emb, emb_ref, atol=1e-12)
    assert np.allclose(probs, probs_ref, atol=1e-12)


def test_forward_repeatable():
    m = make_model(seed=5)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    e1, p1 = m.forward(x)
    e2, p2 = m.forward(x)
    assert np.array_equal(e1, e2) and np.array_equal(p1, p2)


def finite_difference_grads(model, X, y, h=1e-6):
    grads = []
    for param in model.parameters():
        g = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = param[idx]
            param[idx] = orig + h
            lp, _ = model.loss_and_grads(X, y)
            param[idx] = orig - h
            lm, _ = model.loss_and_grads(X, y)
            param[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    m = Classifier(input_dim=3, hidden=(5,), embedding_dim=4, classes=("a", "b", "c"), seed=7)
    X = rng.normal(size=(3, 3))
    y = np.array([0, 2, 1])
    loss, analytic = m.loss_and_grads(X, y)
    assert math.isfinite(loss)
    numeric = finite_difference_grads(m, X, y)
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
        assert rel.max() < 1e-4


def test_train_memorizes_single_sample():
    m = make_model(seed=1)
    rec = FlowRecord(id=0, features=np.array([1.0, -0.5, 0.2, 0.9]), true_label="b")
    cfg = TrainConfig(epochs=200, batch_size=1, learning_rate=0.1, patience=200, seed=0)
    trained = train(m, [(rec, "b")], cfg)
    _, probs = trained.forward(rec)
    assert trained.classes[int(np.argmax(probs))] == "b"


def test_train_two_blobs_high_accuracy():
    recs = synth_gaussians(2, 60, 2, 10.0, seed=4)
    pairs = [(r, r.true_label) for r in recs]
    m = Classifier(input_dim=2, hidden=(16,), embedding_dim=4, classes=("class0", "class1"), seed=2)
    cfg = TrainConfig(epochs=80, batch_size=16, learning_rate=0.05, patience=80, seed=0)
    trained = train(m, pairs, cfg)
    X = features_matrix(recs)
    preds = np.argmax(trained.predict_proba(X), axis=1)
    truth = np.array([0 if r.true_label == "class0" else 1 for r in recs])
    acc = float(np.mean(preds == truth))
    # the nearest-centroid oracle confirms the data itself is separable
    cents = [X[truth == c].mean(axis=0) for c in (0, 1)]
    oracle = np.array([np.argmin([np.sum((x - c) ** 2) for c in cents]) for x in X])
    assert float(np.mean(oracle == truth)) >= 0.99
    assert acc >= 0.99


def test_train_loss_decreases():
    recs = synth_gaussians(3, 30, 4, 6.0, seed=9)
    pairs = [(r, r.true_label) for r in recs]
    m = Classifier(input_dim=4, classes=("class0", "class1", "class2"), seed=0)
    X, y = features_matrix(recs), np.array([int(r.true_label[-1]) for r in recs])
    before = mean_cross_entropy(m, X, y)
    trained = train(m, pairs, TrainConfig(epochs=30, batch_size=16, learning_rate=0.05, patience=30, seed=1))
    after = mean_cross_entropy(trained, X, y)
    assert after <= before


def test_train_deterministic():
    recs = synth_gaussians(2, 30, 3, 5.0, seed=8)
    pairs = [(r, r.true_label) for r in recs]
    cfg = TrainConfig(epochs=20, batch_size=8, learning_rate=0.05, patience=20, seed=3)
    m = Classifier(input_dim=3, classes=("class0", "class1"), seed=6)
    t1 = train(m, pairs, cfg)
    t2 = train(m, pairs, cfg)
    for a, b in zip(t1.parameters(), t2.parameters()):
        assert np.array_equal(a, b)


def test_train_rejects_unknown_label():
    m = make_model()
    rec = FlowRecord(id=0, features=np.zeros(4), true_label="zz")
    with pytest.raises(ValueError, match="'zz'"):
        train(m, [(rec, "zz")], TrainConfig(epochs=1, batch_size=1, learning_rate=0.1, patience=1))


def test_train_divergence_reports_epoch_and_batch():
    m = make_model()
    rec = FlowRecord(id=0, features=np.ones(4), true_label="a")
    m.weights[0][...] = 1e308  # inf activations -> nan loss in the first batch
    with pytest.raises(TrainingDivergedError, match="epoch 0"):
        train(m, [(rec, "a")], TrainConfig(epochs=1, batch_size=1, learning_rate=0.1, patience=1))


def test_expand_output_preserves_old_logits():
    m = make_model(seed=4, classes=("a", "b", "c"))
    before = [w.copy() for w in m.weights]
    out = expand_output(m, ("a", "b", "c", "d"), seed=9)
    assert out.n_classes == 4
    assert np.array_equal(out.weights[-1][:, :3], before[-1])
    for w_old, w_new in zip(before[:-1], out.weights[:-1]):
        assert np.array_equal(w_old, w_new)
    # original untouched
    assert m.n_classes == 3 and np.array_equal(m.weights[-1], before[-1])


def test_expand_output_then_forward_keeps_old_logit_values():
    m = make_model(seed=4, classes=("a", "b", "c"))
    out = expand_output(m, ("a", "b", "c", "d"), seed=9)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=4)
        emb_old = m.embed(x)[0]
        logits_old = emb_old @ m.weights[-1] + m.biases[-1]
        emb_new = out.embed(x)[0]
        logits_new = emb_new @ out.weights[-1] + out.biases[-1]
        # parameters are preserved bit-exactly; the matmul kernel may still
        # reorder accumulation for the wider matrix, so compare to 1 ulp scale
        assert np.allclose(logits_old, logits_new[:3], rtol=0, atol=1e-12)


def test_expand_output_deterministic_and_validated():
    m = make_model(seed=4, classes=("a", "b"))
    o1 = expand_output(m, ("a", "b", "c"), seed=5)
    o2 = expand_output(m, ("a", "b", "c"), seed=5)
    assert np.array_equal(o1.weights[-1], o2.weights[-1])
    with pytest.raises(ValueError):
        expand_output(m, ("a", "b"), seed=5)
    with pytest.raises(ValueError):
        expand_output(m, ("a", "x", "c"), seed=5)
    assert o1.label_version == m.label_version + 1


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = make_model(seed=12, hidden=(8, 6), classes=("a", "b", "c"))
    path = tmp_path / "model.json"
    m.save(path)
    back = Classifier.load(path)
    assert back.classes == m.classes
    assert back.label_version == m.label_version
    for a, b in zip(m.parameters(), back.parameters()):
        assert np.array_equal(a, b)


def test_checkpoint_corruption_errors(tmp_path):
    path = tmp_path / "model.json"
    make_model().save(path)
    path.write_text(path.read_text()[: 40])
    with pytest.raises(CheckpointError):
        Classifier.load(path)
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError):
        Classifier.load(path)
