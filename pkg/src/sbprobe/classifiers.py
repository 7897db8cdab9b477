"""Attribute classifiers and identity verifiers.

The toy classifiers are softmax models over flattened pixels, either linear
(``hidden=0``) or with one tanh hidden layer. Both expose input gradients,
which the white-box privacy models need. The toy verifier embeds images with a
PCA projection fitted on training images and compares embeddings by cosine
similarity. Larger pretrained models can be wrapped by implementing the same
methods.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CapabilityError, ConfigurationError, MetricError, NotReadyError, TrainingError
from .imaging import FaceImage, PosteriorDistribution
from .optim import Adam
from .weights import hash_ids, load_weights, save_weights


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_matrix(X) -> np.ndarray:
    if isinstance(X, FaceImage):
        return X.flat()[None, :]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], FaceImage):
        return np.stack([im.flat() for im in X])
    X = np.asarray(X, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X.reshape(X.shape[0], -1)


class SoftmaxClassifier:
    """Softmax attribute classifier ``xi_a`` over flattened pixel vectors."""

    gradient_capable = True

    def __init__(self, classes: Sequence[str], hidden: int = 0, identifier: str = "toy-softmax",
                 seed: int = 0, trained_on: str = ""):
        if len(classes) < 2:
            raise ConfigurationError("a classifier needs at least two classes")
        self.id = identifier
        self.classes = tuple(str(c) for c in classes)
        self.hidden = int(hidden)
        self.seed = int(seed)
        self.trained_on = trained_on
        self.params: dict[str, np.ndarray] | None = None
        self.image_shape: tuple[int, ...] | None = None

    # -- construction ------------------------------------------------------

    @classmethod
    def uniform_stub(cls, classes: Sequence[str], input_dim: int, identifier: str = "uniform-stub"):
        """Linear model with all-zero weights: every input gets the uniform posterior."""
        clf = cls(classes, hidden=0, identifier=identifier)
        n = len(clf.classes)
        clf.params = {"mean": np.zeros(input_dim), "W": np.zeros((input_dim, n)), "b": np.zeros(n)}
        return clf

    @classmethod
    def from_linear(cls, W: np.ndarray, b: np.ndarray, classes: Sequence[str],
                    identifier: str = "linear") -> "SoftmaxClassifier":
        W = np.asarray(W, dtype=np.float64)
        clf = cls(classes, hidden=0, identifier=identifier)
        clf.params = {"mean": np.zeros(W.shape[0]), "W": W, "b": np.asarray(b, dtype=np.float64)}
        return clf

    @property
    def ready(self) -> bool:
        return self.params is not None

    def _p(self) -> dict[str, np.ndarray]:
        if self.params is None:
            raise NotReadyError(f"classifier {self.id!r} is not trained")
        return self.params

    @property
    def input_dim(self) -> int:
        return self._p()["mean"].shape[0]

    # -- forward / backward --------------------------------------------------

    def _forward(self, X: np.ndarray):
        p = self._p()
        if X.shape[1] != p["mean"].shape[0]:
            raise ConfigurationError(f"classifier {self.id!r} expects {p['mean'].shape[0]} inputs, got {X.shape[1]}")
        xc = X - p["mean"]
        if self.hidden:
            h = np.tanh(xc @ p["W1"] + p["b1"])
            return h @ p["W"] + p["b"], h
        return xc @ p["W"] + p["b"], None

    def logits(self, X) -> np.ndarray:
        return self._forward(_as_matrix(X))[0]

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.logits(X))

    def logit_gradient(self, X, coeffs) -> np.ndarray:
        """Gradient w.r.t. the inputs of ``sum_k coeffs[n, k] * logit_k(X[n])``, row by row."""
        X = _as_matrix(X)
        C = np.broadcast_to(np.asarray(coeffs, dtype=np.float64), (X.shape[0], len(self.classes)))
        p = self._p()
        _, h = self._forward(X)
        if self.hidden:
            gh = (C @ p["W"].T) * (1.0 - h * h)
            return gh @ p["W1"].T
        return C @ p["W"].T

    def input_gradient(self, X, target) -> np.ndarray:
        """Gradient of the cross-entropy to ``target`` (class index or distribution) w.r.t. the inputs."""
        X = _as_matrix(X)
        probs = self.predict_proba(X)
        T = self._target_matrix(target, X.shape[0])
        return self.logit_gradient(X, probs - T)

    def _target_matrix(self, target, n: int) -> np.ndarray:
        # integer targets are class indices, float targets are distributions
        t = np.asarray(target)
        N = len(self.classes)
        if t.dtype.kind in "iub":
            return np.eye(N)[np.broadcast_to(t.astype(np.int64), (n,))]
        return np.broadcast_to(t.astype(np.float64), (n, N))

    # -- training ---------------------------------------------------------------

    def fit(self, X, y, epochs: int = 300, lr: float = 0.01, l2: float = 1e-4,
            batch_size: int | None = None) -> "SoftmaxClassifier":
        X = _as_matrix(X)
        y = np.asarray(y, dtype=np.int64)
        N = len(self.classes)
        if len(np.unique(y)) < 2:
            raise TrainingError("training split contains a single class")
        if y.min() < 0 or y.max() >= N:
            raise TrainingError("labels outside the declared class range")
        rng = np.random.default_rng(self.seed)
        n, D = X.shape
        mean = X.mean(axis=0)
        p: dict[str, np.ndarray] = {"mean": mean}
        if self.hidden:
            p["W1"] = rng.normal(0.0, 1.0 / np.sqrt(D), (D, self.hidden))
            p["b1"] = np.zeros(self.hidden)
            p["W"] = rng.normal(0.0, 1.0 / np.sqrt(self.hidden), (self.hidden, N))
        else:
            p["W"] = np.zeros((D, N))
        p["b"] = np.zeros(N)
        self.params = p
        opt = Adam({k: v for k, v in p.items() if k != "mean"}, lr=lr)
        T = np.eye(N)[y]
        bs = n if batch_size is None else min(batch_size, n)
        for _ in range(epochs):
            order = np.arange(n) if bs == n else rng.permutation(n)
            for s in range(0, n, bs):
                idx = order[s:s + bs]
                xb, tb = X[idx], T[idx]
                z, h = self._forward(xb)
                g = (_softmax(z) - tb) / len(idx)
                xc = xb - mean
                if self.hidden:
                    grads = {"W": h.T @ g + l2 * p["W"], "b": g.sum(axis=0)}
                    gh = (g @ p["W"].T) * (1.0 - h * h)
                    grads["W1"] = xc.T @ gh + l2 * p["W1"]
                    grads["b1"] = gh.sum(axis=0)
                else:
                    grads = {"W": xc.T @ g + l2 * p["W"], "b": g.sum(axis=0)}
                opt.step(grads)
        return self

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict_proba(X).argmax(axis=1) == np.asarray(y)))

    # -- persistence ---------------------------------------------------------

    def save(self, path, **meta):
        p = self._p()
        header = {"architecture": "softmax-mlp" if self.hidden else "softmax-linear", "hidden": self.hidden,
                  "classes": list(self.classes), "seed": self.seed, "id": self.id,
                  "training_split_hash": self.trained_on,
                  "image_shape": list(self.image_shape) if self.image_shape else None, **meta}
        return save_weights(path, header, p)

    @classmethod
    def load(cls, path) -> "SoftmaxClassifier":
        header, arrays = load_weights(path)
        if not str(header.get("architecture", "")).startswith("softmax"):
            raise ConfigurationError(f"{path}: not a softmax classifier container")
        clf = cls(header["classes"], hidden=header["hidden"], identifier=header.get("id", "toy-softmax"),
                  seed=header.get("seed", 0), trained_on=header.get("training_split_hash", ""))
        clf.params = arrays
        if header.get("image_shape"):
            clf.image_shape = tuple(header["image_shape"])
        return clf


AttributeClassifier = SoftmaxClassifier


def classify(classifier, image: FaceImage) -> PosteriorDistribution:
    """Posterior over the classifier's declared classes; only pixels matter."""
    probs = classifier.predict_proba(image)[0]
    return PosteriorDistribution(probs, classifier.classes)


def classify_batch(classifier, images: Sequence[FaceImage]) -> np.ndarray:
    if not images:
        return np.zeros((0, len(classifier.classes)))
    return classifier.predict_proba(np.stack([im.flat() for im in images]))


def train_toy_classifier(images: Sequence[FaceImage], labels: Sequence[int], hidden: int = 0,
                         classes: Sequence[str] = ("0", "1"), seed: int = 0, epochs: int = 300,
                         lr: float = 0.01, l2: float = 1e-4, identifier: str = "toy-softmax") -> SoftmaxClassifier:
    """Train a small gradient-capable classifier on a labelled split (seeded, reproducible)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise TrainingError("images and labels differ in length")
    if len(np.unique(labels)) < 2:
        raise TrainingError("training split contains a single class")
    ids = [f"{im.source_id}:{int(l)}" for im, l in zip(images, labels)]
    clf = SoftmaxClassifier(classes, hidden=hidden, identifier=identifier, seed=seed, trained_on=hash_ids(ids))
    clf.image_shape = images[0].pixels.shape
    return clf.fit(np.stack([im.flat() for im in images]), labels, epochs=epochs, lr=lr, l2=l2)


# ---------------------------------------------------------------------------
# identity verification
# ---------------------------------------------------------------------------


class IdentityVerifier:
    """Embeds images and compares embeddings by cosine similarity."""

    similarity = "cosine"

    def embed(self, X) -> np.ndarray:
        raise NotImplementedError

    @property
    def ready(self) -> bool:
        return True


class PCAVerifier(IdentityVerifier):
    def __init__(self, embedding_dim: int = 32, whiten: bool = True, identifier: str = "toy-pca-verifier"):
        self.id = identifier
        self.embedding_dim = int(embedding_dim)
        self.whiten = bool(whiten)
        self.params: dict[str, np.ndarray] | None = None

    @property
    def ready(self) -> bool:
        return self.params is not None

    def fit(self, images: Sequence[FaceImage] | np.ndarray) -> "PCAVerifier":
        X = _as_matrix(images)
        mean = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
        k = min(self.embedding_dim, vt.shape[0])
        # fix the sign of each component so fits are reproducible
        signs = np.sign(vt[:k, np.argmax(np.abs(vt[:k]), axis=1)].diagonal())
        signs[signs == 0] = 1.0
        V = np.ascontiguousarray((vt[:k] * signs[:, None]).T)
        scale = s[:k] / np.sqrt(max(X.shape[0] - 1, 1)) if self.whiten else np.ones(k)
        scale = np.where(scale > 1e-12, scale, 1.0)
        self.params = {"mean": mean, "V": V, "scale": scale}
        self.embedding_dim = k
        return self

    def embed(self, X) -> np.ndarray:
        if self.params is None:
            raise NotReadyError(f"verifier {self.id!r} is not fitted")
        p = self.params
        return ((_as_matrix(X) - p["mean"]) @ p["V"]) / p["scale"]

    def save(self, path, **meta):
        if self.params is None:
            raise NotReadyError(f"verifier {self.id!r} is not fitted")
        return save_weights(path, {"architecture": "pca-verifier", "embedding_dim": self.embedding_dim,
                                   "whiten": self.whiten, "id": self.id, **meta}, self.params)

    @classmethod
    def load(cls, path) -> "PCAVerifier":
        header, arrays = load_weights(path)
        if header.get("architecture") != "pca-verifier":
            raise ConfigurationError(f"{path}: not a pca-verifier container")
        v = cls(header["embedding_dim"], header["whiten"], header.get("id", "toy-pca-verifier"))
        v.params = arrays
        return v


@dataclass
class FunctionVerifier(IdentityVerifier):
    """Verifier defined by an explicit embedding function (stubs, wrapped external models)."""

    fn: Callable[[np.ndarray], np.ndarray]
    id: str = "function-verifier"
    embedding_dim: int = field(default=0)

    def embed(self, X) -> np.ndarray:
        return np.stack([np.asarray(self.fn(x), dtype=np.float64).reshape(-1) for x in _as_matrix(X)])


def cosine_scores(ea: np.ndarray, eb: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; raises if any embedding is zero."""
    na = np.linalg.norm(ea, axis=1)
    nb = np.linalg.norm(eb, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise MetricError("cosine similarity undefined for a zero embedding")
    s = np.einsum("ij,ij->i", ea, eb) / (na * nb)
    return np.clip(s, -1.0, 1.0)


def verify(verifier: IdentityVerifier, image_a: FaceImage, image_b: FaceImage) -> float:
    if not verifier.ready:
        raise NotReadyError("verifier is not ready")
    e = verifier.embed([image_a, image_b])
    return float(cosine_scores(e[:1], e[1:])[0])


def require_gradients(classifier) -> None:
    if not getattr(classifier, "gradient_capable", False) or not hasattr(classifier, "logit_gradient"):
        raise CapabilityError(f"classifier {getattr(classifier, 'id', classifier)!r} does not expose input gradients")
