"""Attribute-recovery transforms and their composition into named probers.

Five transforms are available: denoising, chess-mask inpainting,
autoencoder reconstruction, background removal through a face parser, and
down/up-scaling super-resolution. A :class:`RecoveryPipeline` runs one or two
of them left to right. The nine standard variants (``PP-D`` ... ``PP-AB``)
are pre-registered in :data:`VARIANTS`.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Mapping, Sequence

import numpy as np

from .backends import (
    Backend,
    BicubicUpscaler,
    FaceParser,
    Inpainter,
    Role,
    SuperResolver,
    resize,
)
from .errors import (
    BackendError,
    ConfigurationError,
    ContractViolation,
    EmptyFaceError,
    NotReadyError,
    PipelineStageError,
    SBProbeError,
)
from .imaging import BinaryMask, FaceImage, Provenance, apply_mask
from .masks import ChessPatternConfig, InpaintAccumulator, MaskSchedule, build_schedule

INPAINT_CONTRACT_TOL = 1e-6


class TransformKind(str, enum.Enum):
    DENOISE = "denoise"
    INPAINT = "inpaint"
    AUTOENCODE = "autoencode"
    BACKGROUND_REMOVE = "background_remove"
    SUPER_RESOLVE = "super_resolve"


_ROLE_OF = {
    TransformKind.DENOISE: Role.DENOISER,
    TransformKind.INPAINT: Role.INPAINTER,
    TransformKind.AUTOENCODE: Role.AUTOENCODER,
    TransformKind.BACKGROUND_REMOVE: Role.FACE_PARSER,
    TransformKind.SUPER_RESOLVE: Role.SUPER_RESOLVER,
}


def _check_role(backend: Backend, role: Role) -> None:
    if getattr(backend, "role", None) != role:
        raise ConfigurationError(f"backend {backend!r} has role {getattr(backend, 'role', None)}, need {role.value}")


def _call_backend(backend: Backend, fn, *args):
    try:
        return np.asarray(fn(*args), dtype=np.float64)
    except SBProbeError:
        raise
    except Exception as exc:
        raise BackendError(backend.identifier, f"{type(exc).__name__}: {exc}") from exc


def _recovered(image: FaceImage, pixels: np.ndarray) -> FaceImage:
    if pixels.shape != image.pixels.shape:
        raise ContractViolation(f"transform changed dimensions {image.pixels.shape} -> {pixels.shape}")
    return image.with_pixels(pixels, Provenance.RECOVERED)


def recover_denoise(image: FaceImage, backend: Backend) -> FaceImage:
    _check_role(backend, Role.DENOISER)
    return _recovered(image, _call_backend(backend, backend.denoise, image.pixels))


def recover_inpaint(image: FaceImage, schedule: MaskSchedule, backend: Inpainter,
                    workers: int = 1) -> FaceImage:
    """Mask with every schedule mask, inpaint the holes, and average the filled pixels.

    Raises :class:`ContractViolation` if the backend alters any unmasked pixel
    by more than 1e-6.
    """
    _check_role(backend, Role.INPAINTER)
    if schedule.shape != image.shape:
        raise ContractViolation(f"schedule is {schedule.shape}, image is {image.shape}")
    src = image.pixels

    def one(i: int) -> tuple[int, np.ndarray]:
        known = ~schedule.zero_region(i)
        masked = src * known[:, :, None]
        filled = _call_backend(backend, backend.inpaint, masked, known)
        if filled.shape != src.shape:
            raise ContractViolation(f"inpainter {backend.identifier!r} changed dimensions")
        dev = np.abs(filled - masked)[known]
        if dev.size and dev.max() > INPAINT_CONTRACT_TOL:
            raise ContractViolation(
                f"inpainter {backend.identifier!r} modified unmasked pixels (max deviation {dev.max():.3g})")
        return i, filled

    acc = InpaintAccumulator(schedule)
    if workers > 1 and backend.spec.concurrent_safe:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            for i, filled in ex.map(one, range(len(schedule))):
                acc.add(i, filled)
    else:
        for i in range(len(schedule)):
            acc.add(*one(i))
    out = acc.result(source_id=image.source_id)
    return image.with_pixels(out.pixels, Provenance.RECOVERED)


def recover_autoencode(image: FaceImage, backend: Backend) -> FaceImage:
    _check_role(backend, Role.AUTOENCODER)
    if not backend.ready:
        raise NotReadyError(f"autoencoder {backend.identifier!r} is not trained")
    return _recovered(image, _call_backend(backend, backend.reconstruct, image.pixels))


def face_mask(image: FaceImage, backend: FaceParser) -> BinaryMask:
    _check_role(backend, Role.FACE_PARSER)
    try:
        labels = np.asarray(backend.parse(image.pixels))
    except SBProbeError:
        raise
    except Exception as exc:
        raise BackendError(backend.identifier, f"{type(exc).__name__}: {exc}") from exc
    if labels.shape != image.shape:
        raise ContractViolation(f"parser returned label map {labels.shape}, image is {image.shape}")
    return BinaryMask(np.isin(labels, backend.face_labels))


def recover_background_removal(image: FaceImage, backend: FaceParser) -> FaceImage:
    mask = face_mask(image, backend)
    if not mask.values.any():
        raise EmptyFaceError(f"parser {backend.identifier!r} found no face pixels in {image.source_id!r}")
    return apply_mask(image, mask).with_provenance(Provenance.RECOVERED)


def low_res_size(shape: tuple[int, int], factor: float | None,
                 low_res: tuple[int, int] | None = None) -> tuple[int, int]:
    """Intermediate size for super-resolution: explicit ``low_res`` wins, else floor(dim / factor)."""
    if low_res is not None:
        return int(low_res[0]), int(low_res[1])
    if factor is None or not factor > 0:
        raise ConfigurationError("super-resolution factor must be positive")
    if factor <= 1:
        return int(shape[0]), int(shape[1])  # no downscale: identity
    return int(math.floor(shape[0] / factor)), int(math.floor(shape[1] / factor))


def recover_super_resolve(image: FaceImage, factor: float | None = 3.6, backend: SuperResolver | None = None,
                          low_res: tuple[int, int] | None = None) -> FaceImage:
    """Downscale bilinearly, then upscale back to the original size with ``backend``."""
    backend = backend or BicubicUpscaler()
    _check_role(backend, Role.SUPER_RESOLVER)
    lh, lw = low_res_size(image.shape, factor, low_res)
    if (lh, lw) == image.shape:
        return image.with_provenance(Provenance.RECOVERED)
    if min(lh, lw) < 8:
        raise ConfigurationError(f"downscaled size {lh}x{lw} is below 8 px")
    small = resize(image.pixels, (lh, lw), "bilinear")
    up = _call_backend(backend, backend.upscale, small, image.shape)
    return _recovered(image, up)


@lru_cache(maxsize=16)
def _schedule_cached(cfg: ChessPatternConfig) -> MaskSchedule:
    return build_schedule(cfg)


@dataclass(frozen=True)
class RecoveryTransform:
    kind: TransformKind
    backend: Backend
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TransformKind(self.kind))
        _check_role(self.backend, _ROLE_OF[self.kind])
        if self.kind is TransformKind.INPAINT and "schedule" not in self.params:
            raise ConfigurationError("inpaint transform needs a 'schedule' parameter")

    @property
    def ready(self) -> bool:
        return self.backend.ready

    def __call__(self, image: FaceImage) -> FaceImage:
        k = self.kind
        if k is TransformKind.DENOISE:
            return recover_denoise(image, self.backend)
        if k is TransformKind.INPAINT:
            return recover_inpaint(image, self._schedule_for(image), self.backend,
                                   workers=int(self.params.get("workers", 1)))
        if k is TransformKind.AUTOENCODE:
            return recover_autoencode(image, self.backend)
        if k is TransformKind.BACKGROUND_REMOVE:
            return recover_background_removal(image, self.backend)
        return recover_super_resolve(image, self.params.get("factor", 3.6), self.backend,
                                     self.params.get("low_res"))

    def _schedule_for(self, image: FaceImage) -> MaskSchedule:
        sched = self.params["schedule"]
        if isinstance(sched, MaskSchedule):
            return sched
        return _schedule_cached(replace(sched, image_dims=image.shape))

    @property
    def label(self) -> str:
        return f"{self.kind.value}[{self.backend.identifier}]"


@dataclass(frozen=True)
class RecoveryPipeline:
    name: str
    stages: tuple[RecoveryTransform, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ConfigurationError(f"pipeline {self.name!r} has no stages")

    def __call__(self, image: FaceImage) -> FaceImage:
        return run_pipeline(image, self)

    @property
    def kinds(self) -> tuple[TransformKind, ...]:
        return tuple(s.kind for s in self.stages)


def run_pipeline(image: FaceImage, pipeline: RecoveryPipeline) -> FaceImage:
    """Apply the stages left to right; a failing stage is reported with its index."""
    for i, st in enumerate(pipeline.stages):
        if not st.ready:
            raise PipelineStageError(pipeline.name, i, NotReadyError(f"{st.label} is not ready"))
    out = image
    for i, st in enumerate(pipeline.stages):
        try:
            out = st(out)
        except Exception as exc:
            raise PipelineStageError(pipeline.name, i, exc) from exc
    return out


VARIANTS: dict[str, tuple[TransformKind, ...]] = {
    "PP-D": (TransformKind.DENOISE,),
    "PP-I": (TransformKind.INPAINT,),
    "PP-A": (TransformKind.AUTOENCODE,),
    "PP-B": (TransformKind.BACKGROUND_REMOVE,),
    "PP-DI": (TransformKind.DENOISE, TransformKind.INPAINT),
    "PP-DA": (TransformKind.DENOISE, TransformKind.AUTOENCODE),
    "PP-DB": (TransformKind.DENOISE, TransformKind.BACKGROUND_REMOVE),
    "PP-IB": (TransformKind.INPAINT, TransformKind.BACKGROUND_REMOVE),
    "PP-AB": (TransformKind.AUTOENCODE, TransformKind.BACKGROUND_REMOVE),
}


@dataclass
class RecoveryToolkit:
    """One backend per role plus the inpainting schedule; builds named pipelines."""

    denoiser: Backend | None = None
    inpainter: Backend | None = None
    autoencoder: Backend | None = None
    face_parser: Backend | None = None
    super_resolver: Backend | None = None
    schedule: MaskSchedule | ChessPatternConfig | None = None
    sr_factor: float = 3.6
    sr_low_res: tuple[int, int] | None = None
    inpaint_workers: int = 1

    def transform(self, kind: TransformKind | str) -> RecoveryTransform:
        kind = TransformKind(kind)
        backend = getattr(self, _ROLE_OF[kind].value)
        if backend is None:
            raise ConfigurationError(f"no {_ROLE_OF[kind].value} backend configured for {kind.value}")
        params: dict[str, Any] = {}
        if kind is TransformKind.INPAINT:
            if self.schedule is None:
                raise ConfigurationError("no mask schedule configured")
            params = {"schedule": self.schedule, "workers": self.inpaint_workers}
        elif kind is TransformKind.SUPER_RESOLVE:
            params = {"factor": self.sr_factor, "low_res": self.sr_low_res}
        return RecoveryTransform(kind, backend, params)

    def pipeline(self, name: str, kinds: Sequence[TransformKind | str] | None = None) -> RecoveryPipeline:
        if kinds is None:
            try:
                kinds = VARIANTS[name]
            except KeyError:
                raise ConfigurationError(f"unknown prober {name!r}; registered: {list(VARIANTS)}") from None
        elif name in VARIANTS and tuple(TransformKind(k) for k in kinds) != VARIANTS[name]:
            raise ConfigurationError(f"{name!r} is a reserved prober name")
        return RecoveryPipeline(name, tuple(self.transform(k) for k in kinds))
