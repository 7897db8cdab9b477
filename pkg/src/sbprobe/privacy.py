"""Privacy-enhancing techniques (the objects under evaluation).

* FGSM: one signed-gradient step against the steering classifier's current
  prediction, optionally with a descending epsilon search.
* Carlini-Wagner L2: tanh-space Adam optimisation of ``||x' - x||^2 + c f(x')``.
* SAN-lite: a small residual generator trained against an adversarial
  attribute discriminator (pushed to uniform posteriors) while an identity
  term keeps verifier embeddings close.
* External: ingest images produced by an outside tool.

Every model is reachable through :class:`PrivacyModel`, whose ``enhance``
maps a :class:`FaceImage` to an enhanced one of the same size.
"""
from __future__ import annotations

import enum
import logging
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .classifiers import PCAVerifier, SoftmaxClassifier, _softmax, require_gradients
from .errors import ConfigurationError, ContractViolation, NotReadyError, TrainingError
from .imaging import FaceImage, Provenance, load_image
from .optim import Adam
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class PrivacyKind(str, enum.Enum):
    ADVERSARIAL = "adversarial_misclassify"
    SYNTHESIS = "synthesis_equalize"
    EXTERNAL = "external"


@dataclass
class AttackResult:
    image: FaceImage
    success: bool
    epsilon: float | None = None
    l2: float = 0.0
    iterations: int = 0
    history: list[float] = field(default_factory=list)  # best L2 so far, per iteration (CW)

    @property
    def meta(self) -> dict:
        return {"success": self.success, "epsilon": self.epsilon, "l2": self.l2, "iterations": self.iterations}


def _enhanced(image: FaceImage, x: np.ndarray) -> FaceImage:
    return image.with_pixels(x.reshape(image.pixels.shape), Provenance.ENHANCED)


def _predicted(classifier, x: np.ndarray) -> int:
    return int(np.argmax(classifier.logits(x[None, :])[0]))


# ---------------------------------------------------------------------------
# FGSM
# ---------------------------------------------------------------------------


def fgsm_direction(image: FaceImage, classifier, label: int | None = None) -> tuple[np.ndarray, int]:
    """sign of the cross-entropy gradient for ``label`` (default: the current prediction)."""
    require_gradients(classifier)
    x = image.flat()
    y = _predicted(classifier, x) if label is None else int(label)
    g = classifier.input_gradient(x[None, :], np.array([y]))[0]
    return np.sign(g), y


def fgsm_attack(image: FaceImage, classifier, epsilon: float = 0.5, epoch_budget: int = 200,
                epsilon_search_range: Sequence[float] | None = None, label: int | None = None) -> AttackResult:
    """FGSM step of size ``epsilon``, or a minimal-flip search over a descending range.

    With a search range ``[hi, lo]`` the candidate steps ``hi ... lo`` (``epoch_budget``
    of them) are tried in decreasing order. The smallest step that still changes
    the predicted class is kept; the sweep stops at the first step that no longer
    does. If even ``hi`` fails, the ``hi`` image is returned with ``success=False``.
    """
    if epsilon < 0:
        raise ConfigurationError("epsilon must be >= 0")
    s, y = fgsm_direction(image, classifier, label)
    x = image.flat()

    def step(eps: float) -> np.ndarray:
        return np.clip(x + eps * s, 0.0, 1.0)

    if epsilon_search_range is None:
        adv = step(epsilon)
        ok = epsilon > 0 and _predicted(classifier, adv) != y
        return AttackResult(_enhanced(image, adv), ok, float(epsilon), float(np.linalg.norm(adv - x)), 1)

    hi, lo = float(max(epsilon_search_range)), float(min(epsilon_search_range))
    if lo < 0 or epoch_budget < 1:
        raise ConfigurationError("search range must be non-negative and the budget >= 1")
    best, best_eps, tried = None, None, 0
    for eps in np.linspace(hi, lo, int(epoch_budget)):
        tried += 1
        adv = step(float(eps))
        if _predicted(classifier, adv) == y:
            break
        best, best_eps = adv, float(eps)
    if best is None:
        adv = step(hi)
        return AttackResult(_enhanced(image, adv), False, hi, float(np.linalg.norm(adv - x)), tried)
    return AttackResult(_enhanced(image, best), True, best_eps, float(np.linalg.norm(best - x)), tried)


def enhance_fgsm(image: FaceImage, classifier, epsilon: float = 0.5, epoch_budget: int = 200,
                 epsilon_search_range: Sequence[float] | None = None) -> FaceImage:
    return fgsm_attack(image, classifier, epsilon, epoch_budget, epsilon_search_range).image


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------


def cw_attack(image: FaceImage, classifier, max_iter: int = 20, learning_rate: float = 0.01,
              init_const: float = 1000.0, confidence: float = 0.0, label: int | None = None) -> AttackResult:
    """Untargeted CW-L2 against ``label`` (default: the current prediction).

    Returns the adversarial candidate with the smallest L2 distance seen, or the
    unchanged input with ``success=False`` if no candidate changed the prediction.
    """
    require_gradients(classifier)
    if max_iter < 0:
        raise ConfigurationError("max_iter must be >= 0")
    x = image.flat()
    y = _predicted(classifier, x) if label is None else int(label)
    K = len(classifier.classes)
    w = {"w": np.arctanh(np.clip(2.0 * x - 1.0, -1 + 1e-6, 1 - 1e-6))}
    opt = Adam(w, lr=learning_rate)
    best, best_l2 = None, np.inf
    history: list[float] = []
    for _ in range(int(max_iter)):
        t = np.tanh(w["w"])
        xa = 0.5 * (t + 1.0)
        z = classifier.logits(xa[None, :])[0]
        other = np.delete(np.arange(K), y)
        j = int(other[np.argmax(z[other])])
        margin = z[y] - z[j]
        diff = xa - x
        l2 = float(np.sqrt(diff @ diff))
        if margin < 0 and l2 < best_l2:
            best, best_l2 = xa.copy(), l2
        history.append(best_l2)
        g = 2.0 * diff
        if margin > -confidence:
            c = np.zeros(K)
            c[y], c[j] = 1.0, -1.0
            g = g + init_const * classifier.logit_gradient(xa[None, :], c)[0]
        opt.step({"w": g * 0.5 * (1.0 - t * t)})
    if best is None:
        return AttackResult(image.with_provenance(Provenance.ENHANCED), False, None, 0.0, int(max_iter), history)
    return AttackResult(_enhanced(image, best), True, None, best_l2, int(max_iter), history)


def enhance_cw(image: FaceImage, classifier, max_iter: int = 20, learning_rate: float = 0.01,
               init_const: float = 1000.0) -> FaceImage:
    return cw_attack(image, classifier, max_iter, learning_rate, init_const).image


# ---------------------------------------------------------------------------
# SAN-lite synthesis model
# ---------------------------------------------------------------------------


def _upsample_basis(h: int, w: int, grid: int) -> np.ndarray:
    """(h*w, grid*grid) bilinear interpolation matrix from a coarse grid to the image."""
    def axis(n: int) -> np.ndarray:
        pos = (np.arange(n) + 0.5) * grid / n - 0.5
        pos = np.clip(pos, 0, grid - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, grid - 1)
        fr = pos - lo
        m = np.zeros((n, grid))
        m[np.arange(n), lo] += 1.0 - fr
        m[np.arange(n), hi] += fr
        return m
    return np.kron(axis(h), axis(w))


class SynthesisModel:
    """SAN-lite: residual generator ``G(x) = clip(x + U (W2 tanh(W1 (x - m) + b1) + b2))``.

    ``U`` upsamples a coarse ``grid x grid x 3`` field, so the edits are smooth.
    ``W2`` starts at zero, so an untrained model is the identity. Training
    alternates between an attribute discriminator fitted to predict the true
    labels from ``G(x)`` and generator steps that push the discriminator (and
    an optional fixed auxiliary classifier) toward uniform posteriors, keep
    verifier embeddings close (cosine) and penalise the edit energy.
    """

    def __init__(self, hidden: int = 32, grid: int = 16, epochs: int = 300, lr: float = 2e-3,
                 attr_weight: float = 1.0, identity_weight: float = 0.5, recon_weight: float = 1.0,
                 disc_steps: int = 5, disc_lr: float = 0.01, seed: int = 0, identifier: str = "san-lite"):
        self.id = identifier
        self.hidden = int(hidden)
        self.grid = int(grid)
        self.epochs = int(epochs)
        self.lr = float(lr)
        self.attr_weight = float(attr_weight)
        self.identity_weight = float(identity_weight)
        self.recon_weight = float(recon_weight)
        self.disc_steps = int(disc_steps)
        self.disc_lr = float(disc_lr)
        self.seed = int(seed)
        self.params: dict[str, np.ndarray] | None = None
        self.image_shape: tuple[int, int, int] | None = None
        self.trained = False
        self._U: np.ndarray | None = None

    @property
    def ready(self) -> bool:
        return self.trained and self.params is not None

    def _basis(self) -> np.ndarray:
        if self._U is None:
            h, w, _ = self.image_shape
            B = _upsample_basis(h, w, self.grid)  # (h*w, g*g)
            # channel-interleaved layout of flattened (h, w, 3) images
            U = np.zeros((h * w * 3, self.grid * self.grid * 3))
            for c in range(3):
                U[c::3, c::3] = B
            self._U = U
        return self._U

    def init(self, image_shape: tuple[int, int, int], mean: np.ndarray | None = None) -> "SynthesisModel":
        """Identity warm start: the residual branch outputs exactly zero."""
        self.image_shape = tuple(image_shape)
        self._U = None
        D = int(np.prod(self.image_shape))
        L = self.grid * self.grid * 3
        rng = np.random.default_rng(self.seed)
        self.params = {
            "mean": np.zeros(D) if mean is None else np.asarray(mean, dtype=np.float64),
            "W1": rng.normal(0.0, 1.0 / np.sqrt(D), (D, self.hidden)),
            "b1": np.zeros(self.hidden),
            "W2": np.zeros((self.hidden, L)),
            "b2": np.zeros(L),
        }
        return self

    def _forward(self, X: np.ndarray):
        p = self.params
        h = np.tanh((X - p["mean"]) @ p["W1"] + p["b1"])
        c = h @ p["W2"] + p["b2"]
        delta = c @ self._basis().T
        raw = X + delta
        return np.clip(raw, 0.0, 1.0), raw, h, delta

    def generate(self, X: np.ndarray) -> np.ndarray:
        if self.params is None:
            raise NotReadyError(f"synthesis model {self.id!r} is not initialised")
        return self._forward(np.atleast_2d(X))[0]

    def fit(self, images: Sequence[FaceImage], labels: Sequence[int], verifier: PCAVerifier | None = None,
            aux_classifier: SoftmaxClassifier | None = None, n_classes: int = 2) -> "SynthesisModel":
        X = np.stack([im.flat() for im in images])
        y = np.asarray(labels, dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise TrainingError("synthesis training needs both attribute classes")
        self.init(images[0].pixels.shape, X.mean(axis=0))
        p = self.params
        n, D = X.shape
        U = self._basis()
        T = np.eye(n_classes)[y]
        uniform = np.full(n_classes, 1.0 / n_classes)
        disc = {"W": np.zeros((D, n_classes)), "b": np.zeros(n_classes)}
        dopt = Adam(disc, lr=self.disc_lr)
        gopt = Adam({k: v for k, v in p.items() if k != "mean"}, lr=self.lr)
        if verifier is not None:
            E0 = verifier.embed(X)
            P = verifier.params["V"] / verifier.params["scale"]  # embed(x) = (x - m) @ P
        mu = p["mean"]
        for _ in range(self.epochs):
            Y, raw, h, delta = self._forward(X)
            for _ in range(self.disc_steps):
                pr = _softmax((Y - mu) @ disc["W"] + disc["b"])
                g = (pr - T) / n
                dopt.step({"W": (Y - mu).T @ g + 1e-3 * disc["W"], "b": g.sum(axis=0)})

            gY = np.zeros_like(Y)
            pr = _softmax((Y - mu) @ disc["W"] + disc["b"])
            gY += self.attr_weight * ((pr - uniform) / n) @ disc["W"].T
            if aux_classifier is not None:
                pa = aux_classifier.predict_proba(Y)
                gY += self.attr_weight * aux_classifier.logit_gradient(Y, (pa - uniform) / n)
            if verifier is not None:
                E = verifier.embed(Y)
                na = np.linalg.norm(E, axis=1, keepdims=True)
                nb = np.linalg.norm(E0, axis=1, keepdims=True)
                cos = np.sum(E * E0, axis=1, keepdims=True) / (na * nb)
                gE = -(E0 / (na * nb) - cos * E / (na * na)) / n
                gY += self.identity_weight * gE @ P.T
            inside = (raw >= 0.0) & (raw <= 1.0)
            gdelta = gY * inside + self.recon_weight * 2.0 * delta / n
            gc = gdelta @ U
            gh = (gc @ p["W2"].T) * (1.0 - h * h)
            gopt.step({"W2": h.T @ gc, "b2": gc.sum(axis=0), "W1": (X - mu).T @ gh, "b1": gh.sum(axis=0)})
        self.trained = True
        return self

    def save(self, path, **meta: Any):
        if self.params is None:
            raise NotReadyError(f"synthesis model {self.id!r} has no parameters")
        header = {"architecture": "san-lite", "hidden": self.hidden, "grid": self.grid, "seed": self.seed,
                  "image_shape": list(self.image_shape), "trained": self.trained, "id": self.id, **meta}
        return save_weights(path, header, self.params)

    @classmethod
    def load(cls, path) -> "SynthesisModel":
        header, arrays = load_weights(path)
        if header.get("architecture") != "san-lite":
            raise ConfigurationError(f"{path}: not a san-lite container")
        m = cls(hidden=header["hidden"], grid=header["grid"], seed=header.get("seed", 0),
                identifier=header.get("id", "san-lite"))
        m.params = arrays
        m.image_shape = tuple(header["image_shape"])
        m.trained = bool(header.get("trained", True))
        return m


def enhance_synthesis(image: FaceImage, model: SynthesisModel) -> FaceImage:
    if not model.ready:
        raise NotReadyError(f"synthesis model {model.id!r} is not trained")
    if tuple(image.pixels.shape) != model.image_shape:
        raise ConfigurationError(f"model expects {model.image_shape}, got {image.pixels.shape}")
    return _enhanced(image, model.generate(image.flat())[0])


# ---------------------------------------------------------------------------
# external tools
# ---------------------------------------------------------------------------


@dataclass
class ExternalBatchResult:
    out_dir: Path
    ok: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    mismatched: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.missing and not self.mismatched


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def run_adapter(adapter: Callable[[Path, Path], Any] | str | None, dir_in: Path, dir_out: Path) -> None:
    """Run a callable ``adapter(dir_in, dir_out)`` or a command template with ``{in}``/``{out}``."""
    if adapter is None:
        return
    if callable(adapter):
        adapter(dir_in, dir_out)
        return
    cmd = [a.replace("{in}", str(dir_in)).replace("{out}", str(dir_out)) for a in shlex.split(adapter)]
    subprocess.run(cmd, check=True)


def enhance_external(image_dir_in: str | Path, image_dir_out: str | Path,
                     adapter: Callable[[Path, Path], Any] | str | None = None) -> ExternalBatchResult:
    """Run the external tool, then pair outputs with inputs by file name and check sizes."""
    dir_in, dir_out = Path(image_dir_in), Path(image_dir_out)
    dir_out.mkdir(parents=True, exist_ok=True)
    run_adapter(adapter, dir_in, dir_out)
    res = ExternalBatchResult(dir_out)
    for src in _list_images(dir_in):
        dst = dir_out / src.name
        if not dst.exists():
            res.missing.append(src.name)
            continue
        if load_image(dst).pixels.shape != load_image(src).pixels.shape:
            res.mismatched.append(src.name)
            continue
        res.ok.append(src.name)
    for name in res.missing:
        log.warning("external enhancement: no output for %s", name)
    for name in res.mismatched:
        log.warning("external enhancement: size mismatch for %s", name)
    return res


# ---------------------------------------------------------------------------
# uniform interface
# ---------------------------------------------------------------------------


@dataclass
class PrivacyModel:
    """A named privacy-enhancing technique behind a single ``enhance`` call.

    ``inverted`` overrides the data-driven inverted-decision rule used by the
    metrics (None keeps the rule).
    """

    name: str
    kind: PrivacyKind
    target_classifier: Any = None
    params: Mapping[str, Any] = field(default_factory=dict)
    model: SynthesisModel | None = None
    external_dir: Path | None = None
    inverted: bool | None = None

    def __post_init__(self) -> None:
        self.kind = PrivacyKind(self.kind)
        if self.kind is PrivacyKind.ADVERSARIAL:
            if self.target_classifier is None:
                raise ConfigurationError(f"{self.name}: adversarial models need a target classifier")
            require_gradients(self.target_classifier)
            if self.params.get("method", "fgsm") not in ("fgsm", "cw"):
                raise ConfigurationError(f"{self.name}: unknown adversarial method {self.params.get('method')!r}")
        if self.kind is PrivacyKind.SYNTHESIS and self.model is None:
            raise ConfigurationError(f"{self.name}: synthesis models need a trained generator")

    @property
    def ready(self) -> bool:
        if self.kind is PrivacyKind.SYNTHESIS:
            return self.model.ready
        if self.kind is PrivacyKind.ADVERSARIAL:
            return self.target_classifier.ready
        return True

    def attack(self, image: FaceImage) -> AttackResult:
        prm = dict(self.params)
        if prm.pop("method", "fgsm") == "cw":
            return cw_attack(image, self.target_classifier, **prm)
        rng = prm.pop("epsilon_search_range", None)
        return fgsm_attack(image, self.target_classifier, epsilon_search_range=rng, **prm)

    def enhance(self, image: FaceImage) -> FaceImage:
        if self.kind is PrivacyKind.ADVERSARIAL:
            return self.attack(image).image
        if self.kind is PrivacyKind.SYNTHESIS:
            return enhance_synthesis(image, self.model)
        if self.external_dir is None:
            return image.with_provenance(Provenance.ENHANCED)
        name = Path(image.source_id).name
        cands = [self.external_dir / name] + [self.external_dir / (Path(name).stem + s) for s in IMAGE_SUFFIXES]
        for c in cands:
            if c.is_file():
                out = load_image(c, Provenance.ENHANCED, image.source_id)
                if out.pixels.shape != image.pixels.shape:
                    raise ContractViolation(f"{c}: external output {out.shape} differs from input {image.shape}")
                return out
        raise FileNotFoundError(f"no external output for {image.source_id!r} in {self.external_dir}")


def identity_model(name: str = "identity") -> PrivacyModel:
    """No-op enhancement, the control condition."""
    return PrivacyModel(name, PrivacyKind.EXTERNAL, inverted=False)
