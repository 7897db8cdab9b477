import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sbprobe.classifiers import (FunctionVerifier, PCAVerifier, SoftmaxClassifier, classify, classify_batch,
                                 cosine_scores, train_toy_classifier, verify)
from sbprobe.data import generate_toy_dataset
from sbprobe.errors import MetricError, NotReadyError, TrainingError
from sbprobe.imaging import FaceImage, Provenance
from sbprobe.weights import hash_ids, load_weights, save_weights


@pytest.fixture(scope="module")
def toy():
    samples = generate_toy_dataset(100, 5, 32, seed=0)
    train = [s for s in samples if int(s.subject_id[1:]) < 50]
    test = [s for s in samples if int(s.subject_id[1:]) >= 50]
    return train, test


@pytest.fixture(scope="module")
def clf(toy):
    train, _ = toy
    return train_toy_classifier([s.image for s in train], [s.label for s in train], classes=("f", "m"), seed=0)


def test_held_out_accuracy(clf, toy):
    _, test = toy
    acc = clf.accuracy(np.stack([s.image.flat() for s in test]), np.array([s.label for s in test]))
    assert acc >= 0.95


def test_positive_training_exemplar(clf, toy):
    train, _ = toy
    male = next(s for s in train if s.label == 1)
    assert classify(clf, male.image)[1] > 0.5


def test_uniform_stub():
    stub = SoftmaxClassifier.uniform_stub(("a", "b", "c"), 12)
    p = classify(stub, FaceImage(np.random.default_rng(0).random((2, 2, 3))))
    np.testing.assert_allclose(p.probabilities, 1 / 3)


@given(st.integers(0, 2 ** 31 - 1))
def test_posteriors_normalised(seed):
    rng = np.random.default_rng(seed)
    c = SoftmaxClassifier(("f", "m"), hidden=4, seed=seed)
    X = rng.random((6, 12))
    c.fit(X, np.array([0, 1, 0, 1, 0, 1]), epochs=2)
    P = c.predict_proba(rng.random((5, 12)))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)


def test_memorises_one_sample_per_class():
    X = np.array([[0.1, 0.9, 0.2], [0.8, 0.2, 0.7]])
    c = SoftmaxClassifier(("a", "b"), seed=0).fit(X, np.array([0, 1]), epochs=200, lr=0.05)
    assert c.accuracy(X, np.array([0, 1])) == 1.0


def test_training_is_deterministic(toy):
    train, _ = toy
    imgs, ys = [s.image for s in train[:60]], [s.label for s in train[:60]]
    a = train_toy_classifier(imgs, ys, hidden=8, seed=3, epochs=20)
    b = train_toy_classifier(imgs, ys, hidden=8, seed=3, epochs=20)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_single_class_split_rejected(toy):
    train, _ = toy
    with pytest.raises(TrainingError):
        train_toy_classifier([s.image for s in train[:3]], [0, 0, 0])


def test_classify_ignores_provenance(clf, toy):
    im = toy[1][0].image
    a = classify(clf, im).probabilities
    b = classify(clf, im.with_provenance(Provenance.ENHANCED)).probabilities
    np.testing.assert_array_equal(a, b)


def test_input_gradient_matches_finite_differences(clf, toy):
    x = toy[1][3].image.flat()
    g = clf.input_gradient(x[None, :], np.array([1]))[0]

    def loss(v):
        return -np.log(clf.predict_proba(v[None, :])[0, 1])

    idx = np.argsort(-np.abs(g))[:5]
    for i in idx:
        e = np.zeros_like(x)
        e[i] = 1e-5
        fd = (loss(x + e) - loss(x - e)) / 2e-5
        assert fd == pytest.approx(g[i], rel=1e-4, abs=1e-8)


def test_classifier_save_load(tmp_path, clf, toy):
    path = clf.save(tmp_path / "clf.sbpw")
    back = SoftmaxClassifier.load(path)
    X = np.stack([s.image.flat() for s in toy[1][:5]])
    np.testing.assert_array_equal(back.predict_proba(X), clf.predict_proba(X))
    assert back.classes == clf.classes and back.trained_on == clf.trained_on


@pytest.fixture(scope="module")
def verifier(toy):
    return PCAVerifier(32).fit([s.image for s in toy[0]])


def test_self_match_and_symmetry(verifier, toy):
    a, b = toy[1][0].image, toy[1][7].image
    assert verify(verifier, a, a) == pytest.approx(1.0, abs=1e-12)
    assert verify(verifier, a, b) == pytest.approx(verify(verifier, b, a), abs=1e-7)


def test_orthogonal_stub_embeddings():
    stub = FunctionVerifier(lambda x: np.array([1.0, 0.0]) if x[0] > 0.5 else np.array([0.0, 1.0]))
    assert verify(stub, FaceImage(np.ones((2, 2, 3))), FaceImage(np.zeros((2, 2, 3)))) == 0.0


def test_mated_scores_exceed_nonmated(verifier, toy):
    test = toy[1]
    E = verifier.embed([s.image for s in test])
    subj = np.array([s.subject_id for s in test])
    a, b = np.triu_indices(len(test), 1)
    s = cosine_scores(E[a], E[b])
    mated = subj[a] == subj[b]
    assert s[mated].mean() > s[~mated].mean()


def test_verifier_errors():
    with pytest.raises(NotReadyError):
        PCAVerifier().embed(np.zeros((1, 12)))
    with pytest.raises(MetricError):
        cosine_scores(np.zeros((1, 3)), np.ones((1, 3)))


def test_verifier_save_load(tmp_path, verifier, toy):
    back = PCAVerifier.load(verifier.save(tmp_path / "v.sbpw"))
    X = [s.image for s in toy[1][:4]]
    np.testing.assert_array_equal(back.embed(X), verifier.embed(X))


def test_classify_batch_shapes(clf):
    assert classify_batch(clf, []).shape == (0, 2)


def test_weight_container_roundtrip(tmp_path):
    arrays = {"a": np.arange(7, dtype=np.int16), "b": np.eye(3), "c": np.zeros((0, 4), np.float32)}
    p = save_weights(tmp_path / "w.sbpw", {"architecture": "x", "seed": 4}, arrays)
    header, back = load_weights(p)
    assert header == {"architecture": "x", "seed": 4}
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)
        assert back[k].dtype == v.dtype


def test_weight_container_rejects_garbage(tmp_path):
    p = tmp_path / "bad.sbpw"
    p.write_bytes(b"not a container")
    with pytest.raises(ValueError):
        load_weights(p)
    good = save_weights(tmp_path / "w.sbpw", {}, {"a": np.ones(100)})
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_weights(good)


def test_hash_ids_order_independent():
    assert hash_ids(["b", "a"]) == hash_ids(["a", "b"]) != hash_ids(["a", "c"])
