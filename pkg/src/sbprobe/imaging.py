"""Image, mask and posterior value types plus the element-wise operations on them.

Pixels are held as float64 RGB rasters of shape ``(h, w, 3)`` with values in
[0, 1]. 8-bit files are divided by 255 on load and rounded back on save.
Grayscale inputs are replicated to three channels.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractViolation


class Provenance(str, enum.Enum):
    ORIGINAL = "original"
    ENHANCED = "enhanced"
    RECOVERED = "recovered"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FaceImage:
    pixels: np.ndarray
    provenance: Provenance = Provenance.ORIGINAL
    source_id: str = ""

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = np.repeat(px[:, :, None], 3, axis=2)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ContractViolation(f"expected an (h, w, 3) raster, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ContractViolation("image dimensions must be positive")
        if not np.all(np.isfinite(px)):
            raise ContractViolation("image contains non-finite values")
        px = np.clip(px, 0.0, 1.0)
        object.__setattr__(self, "pixels", _frozen(np.ascontiguousarray(px)))
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray, provenance: Provenance | str | None = None) -> "FaceImage":
        """Return a new image sharing this one's metadata (pixels are clamped)."""
        return FaceImage(pixels, Provenance(provenance) if provenance is not None else self.provenance, self.source_id)

    def with_provenance(self, provenance: Provenance | str) -> "FaceImage":
        return replace(self, provenance=Provenance(provenance))

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ContractViolation(f"mask must be 2-D, got shape {v.shape}")
        if v.dtype != bool:
            if not np.all((v == 0) | (v == 1)):
                raise ContractViolation("mask values must be 0 or 1")
            v = v.astype(bool)
        object.__setattr__(self, "values", _frozen(np.ascontiguousarray(v)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def invert(self) -> "BinaryMask":
        return BinaryMask(~self.values)

    @classmethod
    def ones(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.ones((h, w), dtype=bool))

    @classmethod
    def zeros(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.zeros((h, w), dtype=bool))


@dataclass(frozen=True, eq=False)
class PosteriorDistribution:
    probabilities: np.ndarray
    classes: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        p = np.asarray(self.probabilities, dtype=np.float64).reshape(-1)
        if p.size == 0:
            raise ContractViolation("empty posterior")
        if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
            raise ContractViolation("posterior entries must lie in [0, 1]")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ContractViolation(f"posterior sums to {p.sum():.8f}, expected 1")
        if self.classes and len(self.classes) != p.size:
            raise ContractViolation("class list length does not match posterior length")
        object.__setattr__(self, "probabilities", _frozen(np.clip(p, 0.0, 1.0)))
        object.__setattr__(self, "classes", tuple(self.classes))

    def __len__(self) -> int:
        return self.probabilities.size

    def __getitem__(self, k: int) -> float:
        return float(self.probabilities[k])


def _check_same_shape(a: tuple[int, ...], b: tuple[int, ...], what: str) -> None:
    if tuple(a) != tuple(b):
        raise ContractViolation(f"{what}: dimension mismatch {tuple(a)} vs {tuple(b)}")


def apply_mask(image: FaceImage, mask: BinaryMask) -> FaceImage:
    """Hadamard product of the image with a binary mask, broadcast over channels."""
    _check_same_shape(image.shape, mask.shape, "apply_mask")
    return image.with_pixels(image.pixels * mask.values[:, :, None])


def lp_distance(a: FaceImage, b: FaceImage, p: float = 2.0) -> float:
    """L_p norm of the pixel-wise difference between two images."""
    if not p > 0:
        raise ContractViolation("p must be positive")
    _check_same_shape(a.pixels.shape, b.pixels.shape, "lp_distance")
    diff = np.abs(a.pixels - b.pixels).reshape(-1)
    if np.isinf(p):
        return float(diff.max())
    if p == 1:
        return float(diff.sum())
    if p == 2:
        return float(np.sqrt(np.dot(diff, diff)))
    return float(np.sum(diff**p) ** (1.0 / p))


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path: str | Path, provenance: Provenance | str = Provenance.ORIGINAL,
               source_id: str | None = None) -> FaceImage:
    path = Path(path)
    with Image.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return FaceImage(arr, Provenance(provenance), source_id if source_id is not None else path.stem)


def save_image(image: FaceImage, path: str | Path) -> Path:
    """Write the image losslessly. Any suffix other than .png is replaced."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        path = path.with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image.pixels)).save(path, format="PNG")
    return path


def quantize(image: FaceImage) -> FaceImage:
    """Round-trip the pixels through 8 bits, as saving and reloading would."""
    return image.with_pixels(to_uint8(image.pixels) / 255.0)
