"""Desk-scale reference backends for the recovery transforms.

Every backend carries a :class:`GenerativeBackendSpec` describing its role,
identifier and whether it is deterministic / safe for concurrent calls. Large
pretrained models plug in by subclassing :class:`Backend` with the same role.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels
from .errors import ConfigurationError, NotReadyError
from .optim import Adam
from .weights import load_weights, save_weights


class Role(str, enum.Enum):
    INPAINTER = "inpainter"
    DENOISER = "denoiser"
    AUTOENCODER = "autoencoder"
    FACE_PARSER = "face_parser"
    SUPER_RESOLVER = "super_resolver"


@dataclass(frozen=True)
class GenerativeBackendSpec:
    role: Role
    identifier: str
    deterministic: bool = True
    concurrent_safe: bool = True


class Backend:
    role: Role

    def __init__(self, identifier: str | None = None, deterministic: bool = True,
                 concurrent_safe: bool = True):
        self.spec = GenerativeBackendSpec(Role(self.role), identifier or type(self).__name__,
                                          deterministic, concurrent_safe)

    @property
    def identifier(self) -> str:
        return self.spec.identifier

    @property
    def ready(self) -> bool:
        return True

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.identifier!r})"


# -- denoisers ---------------------------------------------------------------


class Denoiser(Backend):
    role = Role.DENOISER

    def denoise(self, pixels: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class MedianDenoiser(Denoiser):
    def __init__(self, radius: int = 1, identifier: str | None = None):
        super().__init__(identifier or f"median-r{radius}")
        self.radius = int(radius)

    def denoise(self, pixels):
        return kernels.median_filter(pixels, self.radius)


class GaussianDenoiser(Denoiser):
    def __init__(self, sigma: float = 1.0, identifier: str | None = None):
        super().__init__(identifier or f"gaussian-s{sigma}")
        self.sigma = float(sigma)

    def denoise(self, pixels):
        if self.sigma <= 0:
            return np.array(pixels, dtype=np.float64)
        return ndimage.gaussian_filter(pixels, sigma=(self.sigma, self.sigma, 0), mode="reflect")


class NLMeansDenoiser(Denoiser):
    def __init__(self, patch_radius: int = 1, search_radius: int = 3, strength: float = 0.1,
                 identifier: str | None = None):
        super().__init__(identifier or "nlmeans")
        self.patch_radius = int(patch_radius)
        self.search_radius = int(search_radius)
        self.strength = float(strength)

    def denoise(self, pixels):
        return kernels.nl_means(pixels, self.patch_radius, self.search_radius, self.strength)


# -- inpainters --------------------------------------------------------------


class Inpainter(Backend):
    """Fills pixels where ``known`` is False; must leave known pixels untouched."""

    role = Role.INPAINTER

    def inpaint(self, pixels: np.ndarray, known: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class HarmonicInpainter(Inpainter):
    def __init__(self, tol: float = 1e-6, max_iter: int = 20000, identifier: str | None = None):
        super().__init__(identifier or "harmonic")
        self.tol = float(tol)
        self.max_iter = int(max_iter)

    def inpaint(self, pixels, known):
        return kernels.harmonic_fill(pixels, known, self.tol, self.max_iter)


class OracleInpainter(Inpainter):
    """Fills holes with a reference image; useful as an upper bound and in tests."""

    def __init__(self, reference: np.ndarray, identifier: str | None = None):
        super().__init__(identifier or "oracle")
        self.reference = np.asarray(reference, dtype=np.float64)

    def inpaint(self, pixels, known):
        return np.where(known[:, :, None], pixels, self.reference)


# -- autoencoder -------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class DenseAutoencoder(Backend):
    """One-hidden-layer autoencoder ``D(E(x))`` over flattened images.

    E: tanh(W_e (x - mean) + b_e), D: sigmoid(W_d z + b_d). Trained with MSE and
    Adam on clean images; optional Gaussian input noise during training turns
    it into a denoising autoencoder.
    """

    role = Role.AUTOENCODER

    def __init__(self, latent_dim: int = 64, epochs: int = 200, lr: float = 3e-3,
                 batch_size: int = 32, noise_std: float = 0.0, l2: float = 0.0, seed: int = 0,
                 identifier: str | None = None):
        super().__init__(identifier or f"dense-ae-{latent_dim}")
        self.latent_dim = int(latent_dim)
        self.epochs = int(epochs)
        self.lr = float(lr)
        self.batch_size = int(batch_size)
        self.noise_std = float(noise_std)
        self.l2 = float(l2)
        self.seed = int(seed)
        self.params: dict[str, np.ndarray] | None = None
        self.image_shape: tuple[int, int, int] | None = None

    @property
    def ready(self) -> bool:
        return self.params is not None

    def _require(self):
        if self.params is None:
            raise NotReadyError(f"autoencoder {self.identifier!r} is not trained")
        return self.params

    def encode(self, X: np.ndarray) -> np.ndarray:
        p = self._require()
        return np.tanh((X - p["mean"]) @ p["W_e"] + p["b_e"])

    def decode(self, Z: np.ndarray) -> np.ndarray:
        p = self._require()
        return _sigmoid(Z @ p["W_d"] + p["b_d"])

    def reconstruct(self, pixels: np.ndarray) -> np.ndarray:
        p = self._require()
        if self.image_shape is not None and tuple(pixels.shape) != self.image_shape:
            raise ConfigurationError(f"autoencoder trained on {self.image_shape}, got {pixels.shape}")
        x = pixels.reshape(1, -1)
        return self.decode(self.encode(x)).reshape(pixels.shape)

    def fit(self, images: Sequence[np.ndarray]) -> "DenseAutoencoder":
        X = np.stack([np.asarray(im, dtype=np.float64).reshape(-1) for im in images])
        self.image_shape = tuple(np.asarray(images[0]).shape)
        n, D = X.shape
        k = self.latent_dim
        rng = np.random.default_rng(self.seed)
        mean = X.mean(axis=0)
        p = {
            "mean": mean,
            "W_e": rng.normal(0.0, 1.0 / np.sqrt(D), (D, k)),
            "b_e": np.zeros(k),
            "W_d": rng.normal(0.0, 1.0 / np.sqrt(k), (k, D)),
            "b_d": np.log(np.clip(mean, 1e-3, 1 - 1e-3) / (1 - np.clip(mean, 1e-3, 1 - 1e-3))),
        }
        opt = Adam({name: v for name, v in p.items() if name != "mean"}, lr=self.lr)
        bs = min(self.batch_size, n)
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for s in range(0, n, bs):
                xb = X[order[s:s + bs]]
                xin = xb + rng.normal(0.0, self.noise_std, xb.shape) if self.noise_std > 0 else xb
                h = np.tanh((xin - mean) @ p["W_e"] + p["b_e"])
                out = _sigmoid(h @ p["W_d"] + p["b_d"])
                g_out = 2.0 * (out - xb) / xb.shape[0]
                g_a = g_out * out * (1.0 - out)
                grads = {"W_d": h.T @ g_a, "b_d": g_a.sum(axis=0)}
                g_h = (g_a @ p["W_d"].T) * (1.0 - h * h)
                grads["W_e"] = (xin - mean).T @ g_h
                grads["b_e"] = g_h.sum(axis=0)
                if self.l2:
                    grads["W_e"] += self.l2 * p["W_e"]
                    grads["W_d"] += self.l2 * p["W_d"]
                opt.step(grads)
        self.params = p
        return self

    def save(self, path, **meta: Any):
        p = self._require()
        header = {"architecture": "dense-autoencoder", "latent_dim": self.latent_dim,
                  "image_shape": list(self.image_shape), "seed": self.seed, **meta}
        return save_weights(path, header, p)

    @classmethod
    def load(cls, path, identifier: str | None = None) -> "DenseAutoencoder":
        header, arrays = load_weights(path)
        if header.get("architecture") != "dense-autoencoder":
            raise ConfigurationError(f"{path}: not a dense-autoencoder container")
        ae = cls(latent_dim=header["latent_dim"], seed=header.get("seed", 0), identifier=identifier)
        ae.params = arrays
        ae.image_shape = tuple(header["image_shape"])
        return ae


class FunctionAutoencoder(Backend):
    """Wraps an arbitrary ``pixels -> pixels`` reconstruction callable."""

    role = Role.AUTOENCODER

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], identifier: str | None = None):
        super().__init__(identifier or "function-ae")
        self.fn = fn

    def reconstruct(self, pixels):
        return np.asarray(self.fn(pixels), dtype=np.float64)


# -- face parsers -----------------------------------------------------------


class FaceParser(Backend):
    """Returns an integer label map; labels listed in ``face_labels`` are facial parts."""

    role = Role.FACE_PARSER
    face_labels: tuple[int, ...] = (1,)

    def parse(self, pixels: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ThresholdFaceParser(FaceParser):
    """Labels skin-toned pixels (red minus blue above a threshold) as face.

    Geared to the synthetic face-proxy data, whose backgrounds are blue-grey.
    Holes inside the face region are filled and only the largest connected
    component is kept.
    """

    face_labels = (1,)

    def __init__(self, threshold: float = 0.12, identifier: str | None = None):
        super().__init__(identifier or "threshold-parser")
        self.threshold = float(threshold)

    def parse(self, pixels):
        face = (pixels[:, :, 0] - pixels[:, :, 2]) > self.threshold
        if face.any():
            lab, n = ndimage.label(face)
            if n > 1:
                sizes = ndimage.sum_labels(face, lab, index=np.arange(1, n + 1))
                face = lab == (int(np.argmax(sizes)) + 1)
            face = ndimage.binary_fill_holes(face)
        return face.astype(np.int64)


class LabelMapParser(FaceParser):
    """Wraps a callable returning a label map (used for oracle parsers)."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], face_labels: Sequence[int] = (1,),
                 identifier: str | None = None):
        super().__init__(identifier or "label-map-parser")
        self.fn = fn
        self.face_labels = tuple(face_labels)

    def parse(self, pixels):
        return np.asarray(self.fn(pixels))


# -- super resolution --------------------------------------------------------


def resize(pixels: np.ndarray, size: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Resize an (h, w, c) float image to ``size=(h', w')`` channel by channel."""
    resample = {"bilinear": Image.Resampling.BILINEAR, "bicubic": Image.Resampling.BICUBIC}[method]
    h2, w2 = size
    chans = []
    for c in range(pixels.shape[2]):
        im = Image.fromarray(np.ascontiguousarray(pixels[:, :, c], dtype=np.float32))
        chans.append(np.asarray(im.resize((w2, h2), resample=resample), dtype=np.float64))
    return np.stack(chans, axis=2)


class SuperResolver(Backend):
    role = Role.SUPER_RESOLVER

    def upscale(self, pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
        raise NotImplementedError


class BicubicUpscaler(SuperResolver):
    def __init__(self, identifier: str | None = None):
        super().__init__(identifier or "bicubic")

    def upscale(self, pixels, size):
        return resize(pixels, size, "bicubic")


# -- registry ----------------------------------------------------------------

BACKEND_KINDS: dict[str, type[Backend]] = {
    "median": MedianDenoiser,
    "gaussian": GaussianDenoiser,
    "nlmeans": NLMeansDenoiser,
    "harmonic": HarmonicInpainter,
    "dense_autoencoder": DenseAutoencoder,
    "threshold_parser": ThresholdFaceParser,
    "bicubic": BicubicUpscaler,
}


def make_backend(kind: str, identifier: str | None = None, weights: str | None = None,
                 **params: Any) -> Backend:
    """Instantiate a registered backend kind; learned backends may load ``weights``."""
    try:
        cls = BACKEND_KINDS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown backend kind {kind!r}; known: {sorted(BACKEND_KINDS)}") from None
    if weights is not None:
        if not hasattr(cls, "load"):
            raise ConfigurationError(f"backend kind {kind!r} has no learned weights")
        return cls.load(weights, identifier=identifier)
    try:
        return cls(identifier=identifier, **params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for backend {kind!r}: {exc}") from None
