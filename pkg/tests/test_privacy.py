import shutil

import numpy as np
import pytest
from PIL import Image

from sbprobe.classifiers import SoftmaxClassifier, train_toy_classifier
from sbprobe.data import generate_toy_dataset
from sbprobe.errors import CapabilityError, ConfigurationError, NotReadyError
from sbprobe.imaging import FaceImage, Provenance, load_image, quantize, save_image
from sbprobe.metrics import auc
from sbprobe.privacy import (PrivacyKind, PrivacyModel, SynthesisModel, cw_attack, enhance_cw, enhance_external,
                             enhance_fgsm, enhance_synthesis, fgsm_attack, identity_model)


def linear_clf(w_pos, b=0.0):
    """Two-class linear model whose logit difference (class 1 minus class 0) is w_pos . x + b."""
    w_pos = np.asarray(w_pos, dtype=np.float64)
    W = np.stack([np.zeros_like(w_pos), w_pos], axis=1)
    return SoftmaxClassifier.from_linear(W, np.array([0.0, b]), ("f", "m"))


@pytest.fixture
def two_pixel():
    # a 1x2 RGB image: six inputs
    x = np.array([[[0.5, 0.4, 0.6], [0.3, 0.55, 0.45]]])
    w = np.array([1.0, -2.0, 0.5, 3.0, -1.0, 0.25])
    return FaceImage(x), w


def test_fgsm_zero_epsilon_is_identity(two_pixel):
    im, w = two_pixel
    np.testing.assert_array_equal(enhance_fgsm(im, linear_clf(w), epsilon=0.0).pixels, im.pixels)


def test_fgsm_closed_form_on_linear_model(two_pixel):
    im, w = two_pixel
    clf = linear_clf(w, b=-1.0)
    x = im.flat()
    y = int(w @ x - 1.0 > 0)
    # cross-entropy gradient for the predicted class points along w_other - w_y
    direction = np.sign(-w) if y == 1 else np.sign(w)
    eps = 0.07
    want = np.clip(x + eps * direction, 0, 1)
    np.testing.assert_allclose(enhance_fgsm(im, clf, epsilon=eps).flat(), want, atol=1e-15)


def test_fgsm_step_magnitude_is_exact(rng):
    im = FaceImage(0.3 + 0.4 * rng.random((6, 5, 3)))  # interior, no clamping at eps 0.1
    clf = linear_clf(rng.normal(size=90))
    d = np.abs(enhance_fgsm(im, clf, epsilon=0.1).flat() - im.flat())
    assert np.all(np.isclose(d, 0.1, atol=1e-12) | (d == 0))
    assert np.isclose(d.max(), 0.1, atol=1e-12)


def test_fgsm_search_finds_minimal_grid_epsilon(two_pixel):
    im, w = two_pixel
    clf = linear_clf(w, b=-1.0)
    x = im.flat()
    margin = abs(w @ x - 1.0)
    threshold = margin / np.abs(w).sum()  # flip needs eps * ||w||_1 > margin (no clamping here)
    grid = np.linspace(0.5, 0.001, 200)
    res = fgsm_attack(im, clf, epoch_budget=200, epsilon_search_range=[0.5, 0.001])
    assert res.success
    assert res.epsilon == pytest.approx(grid[grid > threshold].min(), abs=1e-12)
    assert res.image.provenance is Provenance.ENHANCED


def test_fgsm_search_failure_returns_upper_step(two_pixel):
    im, w = two_pixel
    clf = linear_clf(w, b=-50.0)  # far from the boundary
    res = fgsm_attack(im, clf, epoch_budget=10, epsilon_search_range=[0.05, 0.01])
    assert not res.success and res.epsilon == 0.05
    np.testing.assert_allclose(res.image.flat(), enhance_fgsm(im, clf, epsilon=0.05).flat())


def test_cw_zero_iterations_is_identity(two_pixel):
    im, w = two_pixel
    res = cw_attack(im, linear_clf(w), max_iter=0)
    assert not res.success
    np.testing.assert_array_equal(res.image.pixels, im.pixels)
    np.testing.assert_array_equal(enhance_cw(im, linear_clf(w), max_iter=0).pixels, im.pixels)


def test_cw_beats_fgsm_in_l2_near_boundary():
    w = np.array([2.0, 0.2, 1.0, -0.5, 0.1, 3.0])
    x = np.array([0.5, 0.5, 0.5, 0.5, 0.5, 0.5])
    b = -(w @ x) + 0.05  # just on the positive side
    clf = linear_clf(w, b)
    im = FaceImage(x.reshape(1, 2, 3))
    # oracle: smallest FGSM step on a fine grid that flips the decision
    flips = [e for e in np.linspace(0, 0.2, 4001) if w @ np.clip(x - e * np.sign(w), 0, 1) + b < 0]
    fgsm_l2 = min(flips) * np.sqrt(x.size)
    res = cw_attack(im, clf, max_iter=300, learning_rate=0.005, init_const=1.0)
    assert res.success
    assert w @ res.image.flat() + b < 0
    assert res.l2 < fgsm_l2
    # and close to the true minimum-norm flip, margin / ||w||_2
    assert res.l2 == pytest.approx(0.05 / np.linalg.norm(w), rel=0.05)


def test_cw_best_l2_history_is_non_increasing(two_pixel):
    im, w = two_pixel
    res = cw_attack(im, linear_clf(w, b=-1.0), max_iter=100, learning_rate=0.01, init_const=10.0)
    h = np.array(res.history)
    assert np.all(np.diff(h[np.isfinite(h)]) <= 0)
    assert res.success


def test_adversarial_requires_gradients():
    class Opaque:
        classes = ("f", "m")
        ready = True
    with pytest.raises(CapabilityError):
        PrivacyModel("x", PrivacyKind.ADVERSARIAL, Opaque())
    with pytest.raises(ConfigurationError):
        PrivacyModel("x", PrivacyKind.ADVERSARIAL, linear_clf(np.ones(3)), {"method": "pgd"})
    with pytest.raises(ConfigurationError):
        PrivacyModel("x", PrivacyKind.ADVERSARIAL)


@pytest.fixture(scope="module")
def small_toy():
    s = generate_toy_dataset(24, 3, 32, seed=2)
    return [x.image for x in s], np.array([x.label for x in s])


def test_untrained_synthesis_is_identity(small_toy):
    imgs, _ = small_toy
    m = SynthesisModel().init(imgs[0].pixels.shape)
    X = np.stack([im.flat() for im in imgs[:4]])
    np.testing.assert_array_equal(m.generate(X), X)
    with pytest.raises(NotReadyError):
        enhance_synthesis(imgs[0], m)


@pytest.fixture(scope="module")
def trained_san(small_toy):
    imgs, y = small_toy
    clf = train_toy_classifier(imgs, y, seed=0, epochs=200)
    return SynthesisModel(epochs=120, seed=0).fit(imgs, y, aux_classifier=clf), clf


def test_synthesis_lowers_confidence(trained_san, small_toy):
    model, clf = trained_san
    imgs, _ = small_toy
    X = np.stack([im.flat() for im in imgs])
    Y = np.stack([enhance_synthesis(im, model).flat() for im in imgs])
    assert clf.predict_proba(Y).max(axis=1).mean() < clf.predict_proba(X).max(axis=1).mean()
    assert Y.min() >= 0 and Y.max() <= 1


def test_synthesis_save_load(trained_san, small_toy, tmp_path):
    model, _ = trained_san
    back = SynthesisModel.load(model.save(tmp_path / "san.sbpw"))
    im = small_toy[0][5]
    np.testing.assert_array_equal(enhance_synthesis(im, back).pixels, enhance_synthesis(im, model).pixels)


def _write_dir(d, images):
    for i, im in enumerate(images):
        save_image(im, d / f"img{i:02d}.png")


def test_external_copy_adapter_is_identity(tmp_path, small_toy):
    imgs, _ = small_toy
    src, dst = tmp_path / "in", tmp_path / "out"
    _write_dir(src, imgs[:5])
    res = enhance_external(src, dst, lambda a, b: shutil.copytree(a, b, dirs_exist_ok=True))
    assert res.complete and len(res.ok) == 5
    pm = PrivacyModel("ext", PrivacyKind.EXTERNAL, external_dir=dst)
    for i in range(5):
        orig = load_image(src / f"img{i:02d}.png")
        np.testing.assert_array_equal(pm.enhance(orig).pixels, orig.pixels)


def test_external_missing_file_is_reported(tmp_path, small_toy):
    imgs, _ = small_toy
    src, dst = tmp_path / "in", tmp_path / "out"
    _write_dir(src, imgs[:4])

    def partial(a, b):
        for p in sorted(a.iterdir())[:-1]:
            shutil.copy(p, b / p.name)
    res = enhance_external(src, dst, partial)
    assert res.missing == ["img03.png"] and not res.complete


def test_external_size_mismatch_is_reported(tmp_path, small_toy):
    imgs, _ = small_toy
    src, dst = tmp_path / "in", tmp_path / "out"
    _write_dir(src, imgs[:2])

    def shrink(a, b):
        for p in a.iterdir():
            Image.open(p).resize((16, 16)).save(b / p.name)
    assert enhance_external(src, dst, shrink).mismatched == ["img00.png", "img01.png"]


def test_external_noise_matches_in_process(tmp_path, small_toy):
    imgs, y = small_toy
    clf = train_toy_classifier(imgs, y, seed=1, epochs=100)
    noise = np.random.default_rng(7).normal(0, 0.2, imgs[0].pixels.shape)
    src, dst = tmp_path / "in", tmp_path / "out"
    _write_dir(src, imgs)

    def add_noise(a, b):
        for p in sorted(a.iterdir()):
            im = load_image(p)
            save_image(im.with_pixels(im.pixels + noise), b / p.name)
    assert enhance_external(src, dst, add_noise).complete
    pm = PrivacyModel("ext", PrivacyKind.EXTERNAL, external_dir=dst)
    ext = [pm.enhance(load_image(src / f"img{i:02d}.png")).flat() for i in range(len(imgs))]
    direct = [quantize(im.with_pixels(im.pixels + noise)).flat() for im in imgs]
    a = auc(clf.predict_proba(np.stack(ext))[:, 1], y)
    b = auc(clf.predict_proba(np.stack(direct))[:, 1], y)
    assert a == b


def test_identity_model(small_toy):
    im = small_toy[0][0]
    out = identity_model().enhance(im)
    np.testing.assert_array_equal(out.pixels, im.pixels)
    assert out.provenance is Provenance.ENHANCED


def test_fgsm_flip_rate_on_toy_data(toy_cfg, toy_components):
    """Search mode (the configured default) flips >= 90% of correctly classified test images."""
    from sbprobe.harness import build_privacy_model
    c = toy_components
    pm = build_privacy_model("fgsm", toy_cfg["privacy_models"]["fgsm"], toy_cfg, c.dataset, c.splits.train,
                             c.classifier, c.verifier)
    idx = c.splits.test_union
    X = np.stack([c.dataset.images[i].flat() for i in idx])
    pred = c.classifier.predict_proba(X).argmax(axis=1)
    correct = idx[pred == c.dataset.labels[idx]]
    flipped = [pm.attack(c.dataset.images[i]).success for i in correct]
    assert np.mean(flipped) >= 0.9
